//! Update auditing.
//!
//! A model's behaviour on a dataset is summarized per sample as
//! `s = x ∥ a ∥ p`, where `a` is the flattened last-conv activation map and
//! `p` the probability given to the sample's own label. A one-class SVM fitted
//! on the reference model's audit rows scores a client's rows; the share of
//! outliers is the client's poisoned rate `h`.

pub mod ocsvm;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::Update;
use crate::nn::{self, ArchSpec, ModelParams};

pub use ocsvm::{is_outlier, GammaMode, OcsvmModel};

/// One audit row. Rows whose forward pass produced non-finite activations or
/// probabilities are all-zero with `degenerate` set.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditSample {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditSource {
    Train,
    Test,
    Client(usize),
}

impl fmt::Display for AuditSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditSource::Train => f.write_str("train"),
            AuditSource::Test => f.write_str("test"),
            AuditSource::Client(k) => write!(f, "client({k})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditDataset {
    pub rows: Vec<AuditSample>,
    pub source: AuditSource,
    /// Input length `l`.
    pub input_len: usize,
    /// Tap width `j`.
    pub tap_width: usize,
}

impl AuditDataset {
    pub fn row_len(&self) -> usize {
        self.input_len + self.tap_width + 1
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn degenerate_count(&self) -> usize {
        self.rows.iter().filter(|r| r.degenerate).count()
    }

    /// Writes rows as CSV with header `s0,…,s{l+j}`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (0..self.row_len()).map(|i| format!("s{i}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let line: Vec<String> = row.values.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Builds one audit row per sample of `ds`, in order.
pub fn build_audit_dataset(
    arch: &ArchSpec,
    params: &ModelParams,
    ds: &Dataset,
    source: AuditSource,
) -> Result<AuditDataset> {
    if ds.is_empty() {
        return Err(Error::Empty("audit input dataset"));
    }
    if !params.matches(arch) {
        return Err(Error::Dimension("parameters do not match the architecture".into()));
    }
    let l = arch.input_length;
    let j = arch.tap_width();
    let rows = ds
        .samples
        .iter()
        .map(|s| {
            let tap = nn::forward(arch, params, &s.features, s.label)?;
            let degenerate = !tap.class_prob.is_finite() || tap.activations.iter().any(|v| !v.is_finite());
            let values = if degenerate {
                vec![0.0; l + j + 1]
            } else {
                let mut v = Vec::with_capacity(l + j + 1);
                v.extend_from_slice(&s.features);
                v.extend_from_slice(&tap.activations);
                v.push(tap.class_prob);
                v
            };
            Ok(AuditSample { values, degenerate })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditDataset {
        rows,
        source,
        input_len: l,
        tap_width: j,
    })
}

/// Fits the auditor on the reference model's training audit rows.
pub fn ocsvm_fit(da_train: &AuditDataset, nu: f64, gamma_mode: GammaMode) -> Result<OcsvmModel> {
    if da_train.rows.iter().any(|r| r.degenerate) {
        return Err(Error::InvalidArgument(
            "auditor training rows contain degenerate samples".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = da_train.rows.iter().map(|r| r.values.clone()).collect();
    ocsvm::fit(&rows, nu, gamma_mode)
}

/// Decision value of one audit row; degenerate rows score `−∞`.
pub fn ocsvm_decision(model: &OcsvmModel, sample: &AuditSample) -> Result<f64> {
    if sample.values.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "audit row has length {}, model expects {}",
            sample.values.len(),
            model.dim()
        )));
    }
    if sample.degenerate {
        return Ok(f64::NEG_INFINITY);
    }
    model.decision(&sample.values)
}

/// `true` for rows the auditor labels −1.
pub fn classify(model: &OcsvmModel, da: &AuditDataset) -> Result<Vec<bool>> {
    da.rows
        .iter()
        .map(|r| ocsvm_decision(model, r).map(is_outlier))
        .collect()
}

/// Percentage of rows labeled outlier, `100 · o / z`.
pub fn poisoned_rate(model: &OcsvmModel, da: &AuditDataset) -> Result<f64> {
    if da.is_empty() {
        return Err(Error::Empty("audit dataset"));
    }
    let outliers = classify(model, da)?.into_iter().filter(|&o| o).count();
    Ok(outliers as f64 * 100.0 / da.len() as f64)
}

/// Acceptance threshold inputs. The threshold itself is always derived.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub alpha: f64,
    pub h_train: f64,
    pub h_test: f64,
}

impl DetectorConfig {
    /// Deviation tolerance `|h_test − h_train|`.
    pub fn sigma(&self) -> f64 {
        (self.h_test - self.h_train).abs()
    }

    /// `P = h_test + α·σ`.
    pub fn threshold(&self) -> f64 {
        self.h_test + self.alpha * self.sigma()
    }
}

pub fn calibrate(h_train: f64, h_test: f64, alpha: f64) -> Result<DetectorConfig> {
    for (name, h) in [("h_train", h_train), ("h_test", h_test)] {
        if !(0.0..=100.0).contains(&h) {
            return Err(Error::InvalidArgument(format!("{name} = {h} outside [0, 100]")));
        }
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be >= 0")));
    }
    Ok(DetectorConfig {
        alpha,
        h_train,
        h_test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub client_id: usize,
    pub h: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub accepted: bool,
    pub degenerate_count: usize,
}

/// Everything the server needs to audit an update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detector {
    pub arch: ArchSpec,
    pub auditor: OcsvmModel,
    pub config: DetectorConfig,
}

/// Replays `update` over `dp_test` and compares its poisoned rate with the
/// threshold.
pub fn audit_update(
    update: &Update,
    arch: &ArchSpec,
    dp_test: &Dataset,
    am: &OcsvmModel,
    cfg: &DetectorConfig,
) -> Result<Verdict> {
    let da = build_audit_dataset(arch, &update.params, dp_test, AuditSource::Client(update.client_id))
        .map_err(|e| e.context(format!("auditing client {}", update.client_id)))?;
    let h = poisoned_rate(am, &da)?;
    let p = cfg.threshold();
    Ok(Verdict {
        client_id: update.client_id,
        h,
        p,
        accepted: h <= p,
        degenerate_count: da.degenerate_count(),
    })
}

/// Audits every update; output order follows input order.
pub fn audit_all(
    updates: &[Update],
    arch: &ArchSpec,
    dp_test: &Dataset,
    am: &OcsvmModel,
    cfg: &DetectorConfig,
) -> Result<Vec<Verdict>> {
    updates
        .par_iter()
        .map(|u| audit_update(u, arch, dp_test, am, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::nn::init_params;

    fn model_over(rows: Vec<Vec<f64>>) -> (OcsvmModel, AuditDataset) {
        let model = ocsvm::fit(&rows, 0.2, GammaMode::MedianHeuristic).unwrap();
        let da = AuditDataset {
            rows: rows
                .into_iter()
                .map(|values| AuditSample {
                    values,
                    degenerate: false,
                })
                .collect(),
            source: AuditSource::Train,
            input_len: 1,
            tap_width: 0,
        };
        (model, da)
    }

    #[test]
    fn layout_law() {
        let arch = ArchSpec::default();
        let p = init_params(&arch, 2).unwrap();
        let ds = synth_dataset(5, 4, 32, 0.3, 1).unwrap();
        let da = build_audit_dataset(&arch, &p, &ds, AuditSource::Test).unwrap();
        assert_eq!(da.len(), ds.len());
        let (l, j) = (32, arch.tap_width());
        for (row, s) in da.rows.iter().zip(&ds.samples) {
            assert_eq!(row.values.len(), l + j + 1);
            assert_eq!(&row.values[..l], s.features.as_slice());
            let tap = nn::forward(&arch, &p, &s.features, s.label).unwrap();
            assert_eq!(&row.values[l..l + j], tap.activations.as_slice());
            assert_eq!(row.values[l + j], tap.class_prob);
            assert!(!row.degenerate);
        }
    }

    #[test]
    fn non_finite_forward_is_degenerate() {
        let arch = ArchSpec::default();
        let p = init_params(&arch, 2).unwrap().map(|_| 1e300);
        let ds = synth_dataset(5, 1, 32, 0.3, 1).unwrap();
        let da = build_audit_dataset(&arch, &p, &ds, AuditSource::Client(2)).unwrap();
        assert_eq!(da.degenerate_count(), 5);
        assert!(da.rows.iter().all(|r| r.values.iter().all(|&v| v == 0.0)));
        let (model, _) = model_over((0..10).map(|i| vec![i as f64; da.row_len()]).collect());
        assert_eq!(ocsvm_decision(&model, &da.rows[0]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(poisoned_rate(&model, &da).unwrap(), 100.0);
    }

    #[test]
    fn build_rejects_mismatch_and_empty() {
        let arch = ArchSpec::default();
        let p = init_params(&arch, 2).unwrap();
        let empty = Dataset {
            samples: vec![],
            num_classes: 5,
        };
        assert!(build_audit_dataset(&arch, &p, &empty, AuditSource::Test).is_err());
        let mut other = arch.clone();
        other.dense_layers = vec![3];
        let ds = synth_dataset(5, 1, 32, 0.3, 1).unwrap();
        assert!(build_audit_dataset(&other, &p, &ds, AuditSource::Test).is_err());
    }

    #[test]
    fn poisoned_rate_formula() {
        let (model, mut da) = model_over(vec![vec![0.0], vec![0.1], vec![0.2], vec![0.15], vec![0.05]]);
        da.rows.truncate(4);
        for r in &mut da.rows {
            // the centre of the training cloud
            r.values = vec![0.1];
        }
        assert_eq!(poisoned_rate(&model, &da).unwrap(), 0.0);
        da.rows[0].values = vec![1e9];
        assert_eq!(poisoned_rate(&model, &da).unwrap(), 25.0);
        for r in &mut da.rows {
            r.values = vec![-1e9];
        }
        assert_eq!(poisoned_rate(&model, &da).unwrap(), 100.0);
        da.rows.clear();
        assert!(poisoned_rate(&model, &da).is_err());
    }

    #[test]
    fn calibration_matches_reported_thresholds() {
        let ecg = calibrate(5.0, 15.0, 1.0).unwrap();
        assert_eq!(ecg.sigma(), 10.0);
        assert_eq!(ecg.threshold(), 25.0);
        let har = calibrate(10.0, 20.0, 1.0).unwrap();
        assert_eq!(har.threshold(), 30.0);
        let flat = calibrate(12.0, 12.0, 1.0).unwrap();
        assert_eq!(flat.threshold(), 12.0);
        assert!(calibrate(-1.0, 10.0, 1.0).is_err());
        assert!(calibrate(1.0, 101.0, 1.0).is_err());
    }
}
