//! Experiment harness: configuration, model files, reports, runs and the
//! audit scaling benchmark.

pub mod config;
pub mod experiment;
pub mod params_io;
pub mod report;

pub use config::{parse_config, ExperimentConfig};
pub use experiment::{bench_scaling, run_and_write, run_experiment, ExperimentOutcome, Prepared, ScalingPoint};
pub use params_io::{deserialize_params, serialize_params};
pub use report::emit_report;
