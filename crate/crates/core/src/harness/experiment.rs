//! End-to-end experiment execution.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::auditor::{self, Detector};
use crate::data::{self, Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{self, ClientSetup, DetectorSetup, Federation, RoundReport, Update};
use crate::harness::config::{DataSource, ExperimentConfig};
use crate::harness::params_io;
use crate::harness::report::{self, with_suffix};
use crate::nn::{self, ModelParams};
use crate::seed::derive_seed;

/// Datasets and initial parameters materialized from a config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dp_train: Dataset,
    pub dp_test: Dataset,
    pub client_data: Vec<Dataset>,
    pub eval_set: Dataset,
    /// Shared starting point of the global and reference models.
    pub initial: ModelParams,
}

fn check_matches(name: &str, ds: &Dataset, cfg: &ExperimentConfig) -> Result<()> {
    if ds.feature_len() != cfg.arch.input_length {
        return Err(Error::Dimension(format!(
            "{name}: feature length {} but arch.input_length is {}",
            ds.feature_len(),
            cfg.arch.input_length
        )));
    }
    if ds.num_classes > cfg.arch.num_classes {
        return Err(Error::InvalidArgument(format!(
            "{name}: labels reach class {} but arch.num_classes is {}",
            ds.num_classes - 1,
            cfg.arch.num_classes
        )));
    }
    Ok(())
}

impl Prepared {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Prepared> {
        let seed = cfg.seed;
        let classes = cfg.arch.num_classes;
        let length = cfg.arch.input_length;
        let (public, client_data, eval_set, test_fraction) = match &cfg.data {
            DataSource::Synthetic(s) => {
                let public = data::synth_dataset(classes, s.public_per_class, length, s.noise_std, derive_seed(seed, "public", &[]))?;
                let pool = data::synth_dataset(
                    classes,
                    s.client_pool_per_class,
                    length,
                    s.noise_std,
                    derive_seed(seed, "client_pool", &[]),
                )?;
                let eval = data::synth_dataset(classes, s.eval_per_class, length, s.noise_std, derive_seed(seed, "eval", &[]))?;
                let mut spec = PartitionSpec::even(cfg.clients.len());
                for (k, client) in cfg.clients.iter().enumerate() {
                    for (&class, &frac) in &client.deficits {
                        spec = spec.with_deficit(k, class, frac);
                    }
                }
                let parts = data::partition_non_iid(&pool, &spec, derive_seed(seed, "partition", &[]))?;
                (public, parts, eval, s.public_test_fraction)
            }
            DataSource::Csv(c) => {
                let load = |p: &PathBuf| -> Result<Dataset> {
                    let mut ds = data::load_csv(p)?;
                    check_matches(&p.display().to_string(), &ds, cfg)?;
                    ds.num_classes = classes;
                    Ok(ds)
                };
                let public = load(&c.public)?;
                let clients = c.clients.iter().map(load).collect::<Result<Vec<_>>>()?;
                (public, clients, load(&c.eval)?, c.public_test_fraction)
            }
        };
        let (dp_train, dp_test) = data::split(&public, test_fraction, derive_seed(seed, "public_split", &[]))?;
        let initial = nn::init_params(&cfg.arch, derive_seed(seed, "init", &[]))?;
        Ok(Prepared {
            dp_train,
            dp_test,
            client_data,
            eval_set,
            initial,
        })
    }

    /// Reference model and auditor for this experiment.
    pub fn setup_detector(&self, cfg: &ExperimentConfig) -> Result<DetectorSetup> {
        self.setup_detector_from(cfg, &self.initial, derive_seed(cfg.seed, "reference", &[]))
    }

    /// Reference model trained from `start` (the current global model when
    /// refitting between rounds).
    pub fn setup_detector_from(&self, cfg: &ExperimentConfig, start: &ModelParams, seed: u64) -> Result<DetectorSetup> {
        federation::setup_detector(
            &cfg.arch,
            start,
            &self.dp_train,
            &self.dp_test,
            &cfg.training,
            cfg.detector.nu,
            cfg.detector.gamma,
            cfg.detector.alpha,
            seed,
        )
        .map_err(|e| e.context("detector setup"))
    }

    pub fn federation(&self, cfg: &ExperimentConfig, detector: Option<Detector>) -> Federation {
        Federation {
            arch: cfg.arch.clone(),
            clients: self
                .client_data
                .iter()
                .zip(&cfg.clients)
                .map(|(ds, c)| ClientSetup {
                    dataset: ds.clone(),
                    attack: c.attack.clone(),
                })
                .collect(),
            hyper: cfg.training,
            aggregator: cfg.aggregator,
            detector: detector.map(|d| (d, self.dp_test.clone())),
            eval_set: self.eval_set.clone(),
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub final_params: ModelParams,
    /// The detector used in the last round.
    pub detector: Option<Detector>,
}

/// Runs detector setup (when enabled) and every round.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let prepared = Prepared::from_config(cfg)?;
    let detector = if cfg.detector.enabled {
        Some(prepared.setup_detector(cfg)?.detector)
    } else {
        None
    };
    let mut fed = prepared.federation(cfg, detector);
    let mut global = prepared.initial.clone();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        if round > 0 && cfg.detector.enabled && cfg.detector.refit_each_round {
            let seed = derive_seed(cfg.seed, "reference", &[round as u64]);
            let setup = prepared
                .setup_detector_from(cfg, &global, seed)
                .map_err(|e| e.context(format!("round {round}")))?;
            fed.detector = Some((setup.detector, prepared.dp_test.clone()));
        }
        let (next, report) = fed.run_round(round, &global)?;
        global = next;
        reports.push(report);
    }
    Ok(ExperimentOutcome {
        reports,
        final_params: global,
        detector: fed.detector.map(|(d, _)| d),
    })
}

/// Runs an experiment and writes reports, the final global model
/// (`<prefix>_global.flpd`) and, when enabled, the detector
/// (`<prefix>_detector.json`). Returns every written path.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<(ExperimentOutcome, Vec<PathBuf>)> {
    let outcome = run_experiment(cfg)?;
    let prefix = &cfg.output.prefix;
    let (json, csv) = report::emit_report(&outcome.reports, prefix)?;
    let model_path = with_suffix(prefix, "_global.flpd");
    report::write_bytes(&model_path, &params_io::serialize_params(&outcome.final_params))?;
    let mut written = vec![json, csv, model_path];
    if let Some(det) = &outcome.detector {
        let path = with_suffix(prefix, "_detector.json");
        let mut text = serde_json::to_string_pretty(det)?;
        text.push('\n');
        report::write_bytes(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok((outcome, written))
}

/// Audit-phase wall time for each client count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingPoint {
    pub clients: usize,
    pub audit_time: Duration,
}

/// Times the audit of `K` updates for each `K`, with one fixed trained model
/// replicated across clients. Each point is the fastest of `repeats` runs.
pub fn bench_scaling(cfg: &ExperimentConfig, k_values: &[usize], repeats: usize) -> Result<Vec<ScalingPoint>> {
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("client counts must be strictly ascending".into()));
    }
    if k_values.first() == Some(&0) {
        return Err(Error::InvalidArgument("client counts must be positive".into()));
    }
    let prepared = Prepared::from_config(cfg)?;
    let setup = prepared.setup_detector(cfg)?;
    let det = &setup.detector;
    let template = federation::local_train(
        &cfg.arch,
        0,
        &prepared.client_data[0],
        &prepared.initial,
        &cfg.training,
        derive_seed(cfg.seed, "bench", &[]),
        &cfg.clients[0].attack,
    )?;
    let mut points = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let updates: Vec<Update> = (0..k)
            .map(|id| Update {
                client_id: id,
                ..template.clone()
            })
            .collect();
        let mut best = Duration::MAX;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let verdicts = auditor::audit_all(&updates, &cfg.arch, &prepared.dp_test, &det.auditor, &det.config)?;
            let elapsed = start.elapsed();
            debug_assert_eq!(verdicts.len(), k);
            best = best.min(elapsed);
        }
        points.push(ScalingPoint {
            clients: k,
            audit_time: best.max(Duration::from_nanos(1)),
        });
    }
    Ok(points)
}

pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut out = String::from("clients,audit_seconds\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.clients, p.audit_time.as_secs_f64()));
    }
    out
}
