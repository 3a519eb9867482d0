//! Experiment configuration (JSON, strict).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::auditor::GammaMode;
use crate::error::{Error, Result};
use crate::federation::Aggregator;
use crate::nn::{ArchSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchSpec,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default = "default_clients")]
    pub clients: Vec<ClientConfig>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub detector: DetectorSettings,
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticData),
    Csv(CsvData),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticData::default())
    }
}

/// Three independent draws from the class-template generator: the public
/// dataset, the pool partitioned across clients, and the evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub public_per_class: usize,
    pub client_pool_per_class: usize,
    pub eval_per_class: usize,
    pub noise_std: f64,
    pub public_test_fraction: f64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            public_per_class: 200,
            client_pool_per_class: 300,
            eval_per_class: 100,
            noise_std: 1.0,
            public_test_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub public: PathBuf,
    /// One file per client, in client order.
    pub clients: Vec<PathBuf>,
    pub eval: PathBuf,
    #[serde(default = "default_test_fraction")]
    pub public_test_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    #[serde(default)]
    pub attack: AttackSpec,
    /// Class → fraction fewer samples than an even share (synthetic data only).
    #[serde(default)]
    pub deficits: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub enabled: bool,
    pub alpha: f64,
    pub nu: f64,
    pub gamma: GammaMode,
    /// Retrain the reference model and auditor from the current global model
    /// before every round after the first. Off: one calibration per run.
    pub refit_each_round: bool,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            enabled: true,
            alpha: 1.0,
            nu: 0.1,
            gamma: GammaMode::MedianHeuristic,
            refit_each_round: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Reports go to `<prefix>_rounds.json`, `<prefix>_summary.csv`, …
    pub prefix: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            prefix: PathBuf::from("results/run"),
        }
    }
}

fn default_rounds() -> usize {
    1
}

fn default_test_fraction() -> f64 {
    0.5
}

/// Two benign clients with one under-represented class each, plus a third
/// client with a balanced share (the attacker slot).
pub fn default_clients() -> Vec<ClientConfig> {
    vec![
        ClientConfig {
            attack: AttackSpec::None,
            deficits: BTreeMap::from([(0, 0.4)]),
        },
        ClientConfig {
            attack: AttackSpec::None,
            deficits: BTreeMap::from([(1, 0.5)]),
        },
        ClientConfig::default(),
    ]
}

fn config_err(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Parses and validates a config. Every error names the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_string() } else { path };
        config_err(path, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Default experiment with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            arch: ArchSpec::default(),
            data: DataSource::default(),
            clients: default_clients(),
            training: TrainConfig::default(),
            detector: DetectorSettings::default(),
            aggregator: Aggregator::default(),
            rounds: default_rounds(),
            output: OutputConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate().map_err(|e| config_err("arch", e.to_string()))?;
        let classes = self.arch.num_classes;
        let k = self.clients.len();
        if k == 0 {
            return Err(config_err("clients", "at least one client is required"));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                for (key, v) in [
                    ("public_per_class", s.public_per_class),
                    ("client_pool_per_class", s.client_pool_per_class),
                    ("eval_per_class", s.eval_per_class),
                ] {
                    if v == 0 {
                        return Err(config_err(format!("data.synthetic.{key}"), "must be positive"));
                    }
                }
                if s.public_per_class < 2 {
                    return Err(config_err("data.synthetic.public_per_class", "must be at least 2"));
                }
                if s.client_pool_per_class < k {
                    return Err(config_err(
                        "data.synthetic.client_pool_per_class",
                        format!("must be at least the number of clients ({k})"),
                    ));
                }
                if !(s.noise_std >= 0.0 && s.noise_std.is_finite()) {
                    return Err(config_err("data.synthetic.noise_std", "must be finite and >= 0"));
                }
                check_fraction("data.synthetic.public_test_fraction", s.public_test_fraction)?;
            }
            DataSource::Csv(c) => {
                if c.clients.len() != k {
                    return Err(config_err(
                        "data.csv.clients",
                        format!("{} files for {k} clients", c.clients.len()),
                    ));
                }
                check_fraction("data.csv.public_test_fraction", c.public_test_fraction)?;
            }
        }
        let synthetic = matches!(self.data, DataSource::Synthetic(_));
        for (i, client) in self.clients.iter().enumerate() {
            if let Err((field, msg)) = client.attack.validate(classes) {
                return Err(config_err(format!("clients[{i}].attack.{field}"), msg));
            }
            for (&class, &frac) in &client.deficits {
                let path = format!("clients[{i}].deficits.{class}");
                if !synthetic {
                    return Err(config_err(path, "deficits only apply to synthetic data"));
                }
                if class >= classes {
                    return Err(config_err(path, format!("class {class} >= num_classes {classes}")));
                }
                if !(0.0..=0.9).contains(&frac) {
                    return Err(config_err(path, format!("{frac} outside [0, 0.9]")));
                }
            }
        }
        if !(self.training.lr > 0.0 && self.training.lr.is_finite()) {
            return Err(config_err("training.lr", "must be > 0"));
        }
        if self.training.batch_size == 0 {
            return Err(config_err("training.batch_size", "must be positive"));
        }
        let d = &self.detector;
        if !(d.nu > 0.0 && d.nu < 1.0) {
            return Err(config_err("detector.nu", format!("{} outside (0, 1)", d.nu)));
        }
        if !(d.alpha >= 0.0 && d.alpha.is_finite()) {
            return Err(config_err("detector.alpha", format!("{} must be >= 0", d.alpha)));
        }
        if let GammaMode::Fixed(g) = d.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(config_err("detector.gamma.fixed", format!("{g} must be > 0")));
            }
        }
        match self.aggregator {
            Aggregator::Krum { f } if k < f + 3 => {
                return Err(config_err("aggregator.krum.f", format!("krum needs K >= f + 3, K = {k}")));
            }
            Aggregator::TrimmedMean { trim } if k <= 2 * trim => {
                return Err(config_err(
                    "aggregator.trimmed_mean.trim",
                    format!("needs K > 2·trim, K = {k}"),
                ));
            }
            _ => {}
        }
        if self.rounds == 0 {
            return Err(config_err("rounds", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_fraction(path: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(config_err(path, format!("{f} outside (0, 1)")))
    }
}
