//! Federated learning simulator with an activation-based update auditor.
//!
//! A server keeps a public dataset, trains a reference model on it and fits a
//! one-class SVM over "audit samples" (input ∥ last-conv activations ∥
//! own-class probability). Each client update is swapped into the reference
//! architecture, replayed over the public test split, and its outlier
//! percentage `h` is compared against a calibrated threshold before the
//! update may join aggregation.
//!
//! Modules:
//!
//! - [`nn`]: 1-D CNN engine with hand-written backprop and activation tapping.
//! - [`data`]: synthetic time-series generator, CSV loader, splits and
//!   non-IID partitioning.
//! - [`attacks`]: four data-poisoning and four model-poisoning attacks.
//! - [`auditor`]: audit dataset construction, SMO one-class SVM, poisoned rate
//!   and verdicts.
//! - [`federation`]: local training, FedAvg, Krum, median, trimmed mean and
//!   audited rounds.
//! - [`harness`]: experiment config, `FLPD` parameter files, reports and the
//!   scaling benchmark.

pub mod attacks;
pub mod auditor;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
