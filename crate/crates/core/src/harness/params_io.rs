//! `FLPD` parameter files.
//!
//! ```text
//! "FLPD"  version:u32  count:u32
//! count × { rank:u32  dims:u32 × rank  values:f64 × Π dims }
//! ```
//!
//! Integers and floats are little-endian, values row-major. Model parameters
//! are stored as the tensor sequence `w0, b0, w1, b1, …`.

use crate::error::{Error, Result};
use crate::nn::{LayerParams, ModelParams, Tensor};

pub const MAGIC: &[u8; 4] = b"FLPD";
pub const VERSION: u32 = 1;

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let tensors: Vec<&Tensor> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected FLPD".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::new();
    for i in 0..count {
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {i} is too large")))?;
        let raw = cur.take(
            n.checked_mul(8).ok_or_else(|| Error::Format(format!("tensor {i} is too large")))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor { shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(tensors)
}

pub fn serialize_params(params: &ModelParams) -> Vec<u8> {
    encode_tensors(params.tensors())
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ModelParams> {
    let tensors = decode_tensors(bytes)?;
    if tensors.len() % 2 != 0 {
        return Err(Error::Format(format!(
            "{} tensors; model files hold weight/bias pairs",
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter();
    let mut layers = Vec::new();
    while let (Some(weights), Some(biases)) = (it.next(), it.next()) {
        if biases.shape.len() != 1 {
            return Err(Error::Format(format!("layer {} bias is not a vector", layers.len())));
        }
        layers.push(LayerParams { weights, biases });
    }
    Ok(ModelParams { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchSpec};

    #[test]
    fn scalar_file_layout() {
        let scalar = Tensor::new(vec![], vec![2.5]).unwrap();
        let bytes = encode_tensors([&scalar]);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 8);
        assert_eq!(&bytes[..4], b"FLPD");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &0u32.to_le_bytes());
        assert_eq!(&bytes[16..], &2.5f64.to_le_bytes());
        assert_eq!(decode_tensors(&bytes).unwrap(), vec![scalar]);
    }

    #[test]
    fn round_trip_and_corruption() {
        let p = init_params(&ArchSpec::default(), 9).unwrap();
        let bytes = serialize_params(&p);
        assert_eq!(deserialize_params(&bytes).unwrap(), p);
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(deserialize_params(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(deserialize_params(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(deserialize_params(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(deserialize_params(&long).is_err());
    }

    #[test]
    fn odd_tensor_count_is_not_a_model() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(deserialize_params(&encode_tensors([&t])).is_err());
    }
}
