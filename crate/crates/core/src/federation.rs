//! Global rounds: local training, auditing and aggregation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::auditor::{self, AuditSource, Detector, GammaMode, Verdict};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, ArchSpec, Direction, ModelParams, TrainConfig};
use crate::seed::derive_seed;

/// Parameters shared by one client together with its local sample count.
#[derive(Clone, Debug, PartialEq)]
pub struct Update {
    pub client_id: usize,
    pub params: ModelParams,
    pub n_samples: usize,
}

/// Trains one client from the global parameters and applies its attack.
///
/// Data attacks rewrite `client_ds` before training, gradient ascent flips the
/// training direction, and parameter attacks rewrite the trained weights.
/// Training itself uses `seed`; the attack streams are derived from it.
pub fn local_train(
    arch: &ArchSpec,
    client_id: usize,
    client_ds: &Dataset,
    global: &ModelParams,
    hyper: &TrainConfig,
    seed: u64,
    attack: &AttackSpec,
) -> Result<Update> {
    if client_ds.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    let local = attack.apply_to_data(client_ds, derive_seed(seed, "attack_data", &[]))?;
    let direction = match attack {
        AttackSpec::GradientAscent => Direction::Ascent,
        _ => Direction::Descent,
    };
    let trained = nn::train(arch, global, &local, hyper, seed, direction)?;
    let params = attack.apply_to_params(&trained, derive_seed(seed, "attack_params", &[]))?;
    Ok(Update {
        client_id,
        params,
        n_samples: client_ds.len(),
    })
}

fn check_shapes(updates: &[Update]) -> Result<()> {
    let first = updates.first().ok_or(Error::Empty("updates"))?;
    for u in &updates[1..] {
        if !u.params.same_shape(&first.params) {
            return Err(Error::Dimension(format!(
                "update from client {} has a different shape than client {}",
                u.client_id, first.client_id
            )));
        }
    }
    Ok(())
}

/// Updates ordered by client id, so reductions do not depend on input order.
fn by_id(updates: &[Update]) -> Vec<&Update> {
    let mut sorted: Vec<&Update> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    sorted
}

/// Sample-weighted mean `Σ (n_k / n) · W_k` with `n = Σ n_k`.
pub fn fedavg(updates: &[Update]) -> Result<ModelParams> {
    check_shapes(updates)?;
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("updates carry no samples".into()));
    }
    let sorted = by_id(updates);
    let mut acc = vec![0.0; sorted[0].params.num_params()];
    for u in sorted {
        let w = u.n_samples as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(u.params.values()) {
            *a += w * v;
        }
    }
    updates[0].params.with_values(&acc)
}

/// Krum: the update whose `K − f − 2` nearest neighbours are closest in
/// summed squared distance. Ties go to the lowest client id.
pub fn krum(updates: &[Update], f: usize) -> Result<ModelParams> {
    check_shapes(updates)?;
    let k = updates.len();
    if k < f + 3 {
        return Err(Error::InvalidArgument(format!(
            "krum with f = {f} needs at least {} updates, got {k}",
            f + 3
        )));
    }
    let sorted = by_id(updates);
    let flat: Vec<Vec<f64>> = sorted.iter().map(|u| u.params.flatten()).collect();
    let neighbours = k - f - 2;
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for i in 0..k {
        let mut d: Vec<f64> = (0..k)
            .filter(|&j| j != i)
            .map(|j| auditor::ocsvm::sq_dist(&flat[i], &flat[j]))
            .collect();
        d.sort_by(f64::total_cmp);
        let score: f64 = d[..neighbours].iter().sum();
        if score < best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(sorted[best].params.clone())
}

fn per_coordinate(updates: &[Update], reduce: impl Fn(&mut [f64]) -> f64) -> Result<ModelParams> {
    check_shapes(updates)?;
    let flat: Vec<Vec<f64>> = updates.iter().map(|u| u.params.flatten()).collect();
    let mut column = vec![0.0; flat.len()];
    let out: Vec<f64> = (0..flat[0].len())
        .map(|c| {
            for (slot, row) in column.iter_mut().zip(&flat) {
                *slot = row[c];
            }
            column.sort_by(f64::total_cmp);
            reduce(&mut column)
        })
        .collect();
    updates[0].params.with_values(&out)
}

/// Per-coordinate median; the mean of the two middle values for even K.
pub fn coordinate_median(updates: &[Update]) -> Result<ModelParams> {
    per_coordinate(updates, |sorted| {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    })
}

/// Per-coordinate mean after dropping the `trim` largest and `trim` smallest
/// values.
pub fn trimmed_mean(updates: &[Update], trim: usize) -> Result<ModelParams> {
    if updates.len() <= 2 * trim {
        return Err(Error::InvalidArgument(format!(
            "trimming {trim} per side needs more than {} updates, got {}",
            2 * trim,
            updates.len()
        )));
    }
    per_coordinate(updates, |sorted| {
        let kept = &sorted[trim..sorted.len() - trim];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Aggregator {
    #[default]
    Fedavg,
    Krum {
        f: usize,
    },
    CoordinateMedian,
    TrimmedMean {
        trim: usize,
    },
}

impl Aggregator {
    pub fn aggregate(&self, updates: &[Update]) -> Result<ModelParams> {
        match *self {
            Aggregator::Fedavg => fedavg(updates),
            Aggregator::Krum { f } => krum(updates, f),
            Aggregator::CoordinateMedian => coordinate_median(updates),
            Aggregator::TrimmedMean { trim } => trimmed_mean(updates, trim),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Fedavg => f.write_str("fedavg"),
            Aggregator::Krum { f: n } => write!(f, "krum(f={n})"),
            Aggregator::CoordinateMedian => f.write_str("coordinate_median"),
            Aggregator::TrimmedMean { trim } => write!(f, "trimmed_mean(trim={trim})"),
        }
    }
}

/// Aggregates the accepted updates only. `None` when nothing was accepted.
pub fn aggregate_accepted(
    aggregator: &Aggregator,
    updates: &[Update],
    accepted: &[bool],
) -> Result<Option<ModelParams>> {
    let kept: Vec<Update> = updates
        .iter()
        .zip(accepted)
        .filter(|(_, &ok)| ok)
        .map(|(u, _)| u.clone())
        .collect();
    if kept.is_empty() {
        return Ok(None);
    }
    aggregator.aggregate(&kept).map(Some)
}

/// Reference model and fitted auditor.
#[derive(Clone, Debug)]
pub struct DetectorSetup {
    pub reference: ModelParams,
    pub detector: Detector,
}

/// Trains the reference model from `initial` on `dp_train`, fits the auditor
/// on its training audit rows and calibrates the threshold from the outlier
/// rates on the train and test audit rows.
#[allow(clippy::too_many_arguments)]
pub fn setup_detector(
    arch: &ArchSpec,
    initial: &ModelParams,
    dp_train: &Dataset,
    dp_test: &Dataset,
    hyper: &TrainConfig,
    nu: f64,
    gamma_mode: GammaMode,
    alpha: f64,
    seed: u64,
) -> Result<DetectorSetup> {
    for (name, ds) in [("public train split", dp_train), ("public test split", dp_test)] {
        if ds.is_empty() {
            return Err(Error::Empty("public dataset split"));
        }
        if let Some(c) = ds.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("{name} has no samples of class {c}")));
        }
    }
    let reference = nn::train(arch, initial, dp_train, hyper, seed, Direction::Descent)?;
    let da_train = auditor::build_audit_dataset(arch, &reference, dp_train, AuditSource::Train)?;
    let da_test = auditor::build_audit_dataset(arch, &reference, dp_test, AuditSource::Test)?;
    let am = auditor::ocsvm_fit(&da_train, nu, gamma_mode)?;
    let h_train = auditor::poisoned_rate(&am, &da_train)?;
    let h_test = auditor::poisoned_rate(&am, &da_test)?;
    let config = auditor::calibrate(h_train, h_test, alpha)?;
    Ok(DetectorSetup {
        reference,
        detector: Detector {
            arch: arch.clone(),
            auditor: am,
            config,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientSetup {
    pub dataset: Dataset,
    pub attack: AttackSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub attack: String,
    pub n_samples: usize,
    /// Absent when the detector is disabled.
    pub verdict: Option<Verdict>,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub aggregator: String,
    pub detector_enabled: bool,
    pub clients: Vec<ClientRecord>,
    pub accepted_ids: Vec<usize>,
    /// Set when every update was rejected and the global model was kept.
    pub all_rejected: bool,
    pub acc_before: f64,
    pub acc_after: f64,
}

impl RoundReport {
    pub fn verdicts(&self) -> impl Iterator<Item = &Verdict> {
        self.clients.iter().filter_map(|c| c.verdict.as_ref())
    }
}

/// Static parts of a federated run.
#[derive(Clone, Debug)]
pub struct Federation {
    pub arch: ArchSpec,
    pub clients: Vec<ClientSetup>,
    pub hyper: TrainConfig,
    pub aggregator: Aggregator,
    /// Auditor plus the public test split it replays updates on.
    pub detector: Option<(Detector, Dataset)>,
    /// Held-out set for global accuracy.
    pub eval_set: Dataset,
    pub seed: u64,
}

impl Federation {
    pub fn client_seed(&self, round: usize, client_id: usize) -> u64 {
        derive_seed(self.seed, "local_train", &[round as u64, client_id as u64])
    }

    /// Trains every client for `round` starting from `global`.
    pub fn collect_updates(&self, round: usize, global: &ModelParams) -> Result<Vec<Update>> {
        self.clients
            .par_iter()
            .enumerate()
            .map(|(id, client)| {
                local_train(
                    &self.arch,
                    id,
                    &client.dataset,
                    global,
                    &self.hyper,
                    self.client_seed(round, id),
                    &client.attack,
                )
                .map_err(|e| e.context(format!("round {round}, client {id}")))
            })
            .collect()
    }

    /// Audits and aggregates already collected updates.
    pub fn finish_round(&self, round: usize, global: &ModelParams, updates: &[Update]) -> Result<(ModelParams, RoundReport)> {
        let verdicts: Vec<Option<Verdict>> = match &self.detector {
            Some((det, dp_test)) => auditor::audit_all(updates, &self.arch, dp_test, &det.auditor, &det.config)?
                .into_iter()
                .map(Some)
                .collect(),
            None => vec![None; updates.len()],
        };
        let accepted: Vec<bool> = verdicts.iter().map(|v| v.as_ref().is_none_or(|v| v.accepted)).collect();
        let aggregated = aggregate_accepted(&self.aggregator, updates, &accepted)
            .map_err(|e| e.context(format!("round {round}, aggregation")))?;
        let all_rejected = aggregated.is_none();
        let next = aggregated.unwrap_or_else(|| global.clone());

        let acc_before = nn::evaluate(&self.arch, global, &self.eval_set)?;
        let acc_after = nn::evaluate(&self.arch, &next, &self.eval_set)?;
        let clients = updates
            .iter()
            .zip(verdicts)
            .zip(&accepted)
            .map(|((u, verdict), &ok)| ClientRecord {
                client_id: u.client_id,
                attack: self.clients[u.client_id].attack.code().to_string(),
                n_samples: u.n_samples,
                verdict,
                accepted: ok,
            })
            .collect();
        let report = RoundReport {
            round,
            aggregator: self.aggregator.to_string(),
            detector_enabled: self.detector.is_some(),
            clients,
            accepted_ids: updates.iter().zip(&accepted).filter(|(_, &ok)| ok).map(|(u, _)| u.client_id).collect(),
            all_rejected,
            acc_before,
            acc_after,
        };
        Ok((next, report))
    }

    pub fn run_round(&self, round: usize, global: &ModelParams) -> Result<(ModelParams, RoundReport)> {
        let updates = self.collect_updates(round, global)?;
        self.finish_round(round, global, &updates)
    }
}
