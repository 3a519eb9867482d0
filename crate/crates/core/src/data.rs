//! Datasets: synthetic generation, CSV I/O, stratified splits and non-IID
//! client partitioning.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Labeled fixed-length series. Every sample has the same feature length and a
/// label below `num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let ds = Dataset {
            samples,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        let len = self.feature_len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != len {
                return Err(Error::Dimension(format!(
                    "sample {i} has {} features, expected {len}",
                    s.features.len()
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} label {} >= num_classes {}",
                    s.label, self.num_classes
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sample {i} has non-finite features")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature length `l`; 0 for an empty dataset.
    pub fn feature_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Population standard deviation over every feature value of every sample.
    pub fn feature_std(&self) -> f64 {
        let n = self.samples.iter().map(|s| s.features.len()).sum::<usize>();
        if n == 0 {
            return 0.0;
        }
        let mean = self.samples.iter().flat_map(|s| &s.features).sum::<f64>() / n as f64;
        let var = self
            .samples
            .iter()
            .flat_map(|s| &s.features)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        var.sqrt()
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }
}

/// Noiseless waveform of class `class`: a sinusoid whose frequency grows with
/// the class index and whose phase is offset per class.
pub fn class_template(class: usize, length: usize) -> Vec<f64> {
    let freq = 1.0 + class as f64;
    let phase = 0.7 * class as f64;
    (0..length)
        .map(|t| (2.0 * PI * freq * t as f64 / length as f64 + phase).sin())
        .collect()
}

/// Balanced synthetic dataset: `samples_per_class` noisy copies of each class
/// template, interleaved by class (`0, 1, …, C−1, 0, 1, …`).
pub fn synth_dataset(
    num_classes: usize,
    samples_per_class: usize,
    length: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 || length == 0 {
        return Err(Error::InvalidArgument(
            "num_classes, samples_per_class and length must be positive".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std {noise_std} must be finite and >= 0")));
    }
    let templates: Vec<Vec<f64>> = (0..num_classes).map(|c| class_template(c, length)).collect();
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (label, template) in templates.iter().enumerate() {
            let features = template
                .iter()
                .map(|&v| if noise_std > 0.0 { v + noise.sample(&mut rng) } else { v })
                .collect();
            samples.push(Sample { features, label });
        }
    }
    Ok(Dataset {
        samples,
        num_classes,
    })
}

/// Stratified split into `(train, test)`. Each class contributes
/// `round(n_c · test_fraction)` samples to test, clamped so both sides keep at
/// least one. Both outputs preserve the input order.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut is_test = vec![false; ds.len()];
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples; a stratified split needs at least 2",
                idx.len()
            )));
        }
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_test[i]);
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Per-client, per-class shortfalls relative to an even share.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// `(client, class) → deficit fraction`; missing entries mean 0.
    pub deficits: BTreeMap<(usize, usize), f64>,
}

impl PartitionSpec {
    pub const MAX_DEFICIT: f64 = 0.9;

    pub fn even(num_clients: usize) -> Self {
        PartitionSpec {
            num_clients,
            deficits: BTreeMap::new(),
        }
    }

    pub fn with_deficit(mut self, client: usize, class: usize, fraction: f64) -> Self {
        self.deficits.insert((client, class), fraction);
        self
    }

    pub fn deficit(&self, client: usize, class: usize) -> f64 {
        self.deficits.get(&(client, class)).copied().unwrap_or(0.0)
    }
}

/// Splits `ds` across clients. Each class is shuffled and cut into
/// `num_clients` equal shares of `⌊n_c / K⌋`; client `k` keeps the first
/// `round((1 − deficit(k, c)) · share)` samples of its share and the rest is
/// discarded. Clients are disjoint and keep input order.
pub fn partition_non_iid(ds: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<Dataset>> {
    let k = spec.num_clients;
    if k == 0 {
        return Err(Error::InvalidArgument("num_clients must be at least 1".into()));
    }
    for (&(client, class), &frac) in &spec.deficits {
        if client >= k || class >= ds.num_classes {
            return Err(Error::InvalidArgument(format!(
                "deficit for (client {client}, class {class}) is out of range"
            )));
        }
        if !(0.0..=PartitionSpec::MAX_DEFICIT).contains(&frac) {
            return Err(Error::InvalidArgument(format!(
                "deficit {frac} for (client {client}, class {class}) outside [0, {}]",
                PartitionSpec::MAX_DEFICIT
            )));
        }
    }
    let mut rng = seed::rng(seed);
    let mut owner: Vec<Option<usize>> = vec![None; ds.len()];
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        let share = idx.len() / k;
        if share == 0 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, fewer than the {k} clients",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for client in 0..k {
            let keep = ((1.0 - spec.deficit(client, class)) * share as f64).round() as usize;
            for &i in &idx[client * share..client * share + keep] {
                owner[i] = Some(client);
            }
        }
    }
    let mut parts = vec![Vec::new(); k];
    for (i, o) in owner.iter().enumerate() {
        if let Some(client) = o {
            parts[*client].push(i);
        }
    }
    Ok(parts.iter().map(|idx| ds.subset(idx)).collect())
}

/// Loads `f0,…,f{l−1},label` CSV. The number of classes is `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let err = |line: usize, msg: String| Error::Csv {
        path: shown.clone(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let width = headers.len();
    if width < 2 {
        return Err(err(1, "header needs at least one feature column and `label`".into()));
    }
    for (i, h) in headers.iter().enumerate() {
        let expected = if i + 1 == width { "label".to_string() } else { format!("f{i}") };
        if h.trim() != expected {
            return Err(err(1, format!("header column {i} is `{h}`, expected `{expected}`")));
        }
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(err(line, format!("row has {} fields, expected {width}", record.len())));
        }
        let mut features = Vec::with_capacity(width - 1);
        for (col, field) in record.iter().take(width - 1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(line, format!("column f{col}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(line, format!("column f{col}: non-finite value `{field}`")));
            }
            features.push(v);
        }
        let label_field = record[width - 1].trim();
        let label: usize = label_field
            .parse()
            .map_err(|_| err(line, format!("label `{label_field}` is not a class index")))?;
        samples.push(Sample { features, label });
    }
    if samples.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Ok(Dataset {
        samples,
        num_classes,
    })
}

/// Writes `ds` in the format read by [`load_csv`]. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let l = ds.feature_len();
    let header: Vec<String> = (0..l).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for s in &ds.samples {
        for v in &s.features {
            write!(out, "{v},")?;
        }
        writeln!(out, "{}", s.label)?;
    }
    out.flush()?;
    Ok(())
}
