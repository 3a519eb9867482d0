//! Poisoning attacks run by a malicious client.
//!
//! Data attacks rewrite the local dataset before training; model attacks
//! rewrite the trained parameters before they are shared. Gradient ascent is a
//! training mode rather than a transformation and is driven from
//! [`crate::federation::local_train`].

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, ArchSpec, Direction, ModelParams, TrainConfig};
use crate::seed;

fn full() -> f64 {
    1.0
}
fn default_swap_pair() -> (usize, usize) {
    (0, 1)
}
fn default_sign_scale() -> f64 {
    3.0
}
fn default_same_value() -> f64 {
    100.0
}
fn default_parameter_noise() -> f64 {
    AttackSpec::DEFAULT_PARAMETER_NOISE
}

/// What a client does to its data or parameters. Serialized with a `kind` tag
/// (`NONE`, `RL`, `RLF`, `LS`, `FP`, `SF`, `SV`, `AGA`, `GA`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum AttackSpec {
    #[default]
    #[serde(rename = "NONE")]
    None,
    /// Random label flip.
    #[serde(rename = "RL")]
    RandomLabelFlip {
        #[serde(default = "full")]
        fraction: f64,
    },
    /// Random label flip plus Gaussian feature noise. `noise_std = None` uses
    /// three times the dataset's feature standard deviation.
    #[serde(rename = "RLF")]
    RandomLabelFeature {
        #[serde(default = "full")]
        fraction: f64,
        #[serde(default)]
        noise_std: Option<f64>,
    },
    #[serde(rename = "LS")]
    LabelSwap {
        #[serde(default = "default_swap_pair")]
        swap_pair: (usize, usize),
        #[serde(default = "full")]
        fraction: f64,
    },
    /// Gaussian feature noise, labels untouched.
    #[serde(rename = "FP")]
    FeaturePoison {
        #[serde(default = "full")]
        fraction: f64,
        #[serde(default)]
        noise_std: Option<f64>,
    },
    #[serde(rename = "SF")]
    SignFlip {
        #[serde(default = "default_sign_scale")]
        scale: f64,
    },
    #[serde(rename = "SV")]
    SameValue {
        #[serde(default = "default_same_value")]
        value: f64,
    },
    #[serde(rename = "AGA")]
    AdditiveGaussian {
        #[serde(default = "default_parameter_noise")]
        noise_std: f64,
    },
    #[serde(rename = "GA")]
    GradientAscent,
}

impl AttackSpec {
    /// Standard deviation of the additive parameter noise when none is given.
    pub const DEFAULT_PARAMETER_NOISE: f64 = 0.5;
    /// Feature noise, as a multiple of the dataset feature std, when none is
    /// given.
    pub const FEATURE_NOISE_MULTIPLIER: f64 = 3.0;

    /// Every attack with its default strength, in the order data then model.
    pub fn all_defaults() -> Vec<AttackSpec> {
        vec![
            AttackSpec::RandomLabelFlip { fraction: 1.0 },
            AttackSpec::RandomLabelFeature {
                fraction: 1.0,
                noise_std: None,
            },
            AttackSpec::LabelSwap {
                swap_pair: default_swap_pair(),
                fraction: 1.0,
            },
            AttackSpec::FeaturePoison {
                fraction: 1.0,
                noise_std: None,
            },
            AttackSpec::SignFlip {
                scale: default_sign_scale(),
            },
            AttackSpec::SameValue {
                value: default_same_value(),
            },
            AttackSpec::AdditiveGaussian {
                noise_std: default_parameter_noise(),
            },
            AttackSpec::GradientAscent,
        ]
    }

    pub fn code(&self) -> &'static str {
        match self {
            AttackSpec::None => "NONE",
            AttackSpec::RandomLabelFlip { .. } => "RL",
            AttackSpec::RandomLabelFeature { .. } => "RLF",
            AttackSpec::LabelSwap { .. } => "LS",
            AttackSpec::FeaturePoison { .. } => "FP",
            AttackSpec::SignFlip { .. } => "SF",
            AttackSpec::SameValue { .. } => "SV",
            AttackSpec::AdditiveGaussian { .. } => "AGA",
            AttackSpec::GradientAscent => "GA",
        }
    }

    pub fn is_data_attack(&self) -> bool {
        matches!(
            self,
            AttackSpec::RandomLabelFlip { .. }
                | AttackSpec::RandomLabelFeature { .. }
                | AttackSpec::LabelSwap { .. }
                | AttackSpec::FeaturePoison { .. }
        )
    }

    pub fn is_model_attack(&self) -> bool {
        matches!(
            self,
            AttackSpec::SignFlip { .. } | AttackSpec::SameValue { .. } | AttackSpec::AdditiveGaussian { .. }
        )
    }

    /// Range checks for the attack parameters. Errors carry the field name.
    pub fn validate(&self, num_classes: usize) -> std::result::Result<(), (&'static str, String)> {
        let fraction_ok = |f: f64| {
            if f > 0.0 && f <= 1.0 {
                Ok(())
            } else {
                Err(("fraction", format!("{f} must lie in (0, 1]")))
            }
        };
        let std_ok = |s: Option<f64>| match s {
            Some(s) if !(s > 0.0 && s.is_finite()) => Err(("noise_std", format!("{s} must be > 0"))),
            _ => Ok(()),
        };
        match *self {
            AttackSpec::None | AttackSpec::GradientAscent => Ok(()),
            AttackSpec::RandomLabelFlip { fraction } => fraction_ok(fraction),
            AttackSpec::RandomLabelFeature { fraction, noise_std } => {
                fraction_ok(fraction)?;
                match noise_std {
                    Some(s) if !(s >= 0.0 && s.is_finite()) => Err(("noise_std", format!("{s} must be >= 0"))),
                    _ => Ok(()),
                }
            }
            AttackSpec::FeaturePoison { fraction, noise_std } => {
                fraction_ok(fraction)?;
                std_ok(noise_std)
            }
            AttackSpec::LabelSwap { swap_pair: (a, b), fraction } => {
                fraction_ok(fraction)?;
                if a == b {
                    Err(("swap_pair", format!("classes must differ, got ({a}, {b})")))
                } else if a >= num_classes || b >= num_classes {
                    Err(("swap_pair", format!("({a}, {b}) outside 0..{num_classes}")))
                } else {
                    Ok(())
                }
            }
            AttackSpec::SignFlip { scale } => {
                if scale >= 1.0 && scale.is_finite() {
                    Ok(())
                } else {
                    Err(("scale", format!("{scale} must be >= 1")))
                }
            }
            AttackSpec::SameValue { value } => {
                if value.is_finite() {
                    Ok(())
                } else {
                    Err(("value", format!("{value} must be finite")))
                }
            }
            AttackSpec::AdditiveGaussian { noise_std } => std_ok(Some(noise_std)),
        }
    }

    /// Applies a data attack; other kinds return the dataset unchanged.
    pub fn apply_to_data(&self, ds: &Dataset, seed: u64) -> Result<Dataset> {
        let default_std = || AttackSpec::FEATURE_NOISE_MULTIPLIER * ds.feature_std();
        match *self {
            AttackSpec::RandomLabelFlip { fraction } => random_label_flip(ds, fraction, seed),
            AttackSpec::RandomLabelFeature { fraction, noise_std } => {
                random_label_and_feature(ds, fraction, noise_std.unwrap_or_else(default_std), seed)
            }
            AttackSpec::LabelSwap { swap_pair: (a, b), fraction } => label_swap(ds, a, b, fraction, seed),
            AttackSpec::FeaturePoison { fraction, noise_std } => {
                feature_poison(ds, fraction, noise_std.unwrap_or_else(default_std), seed)
            }
            _ => Ok(ds.clone()),
        }
    }

    /// Applies a model attack; other kinds return the parameters unchanged.
    pub fn apply_to_params(&self, params: &ModelParams, seed: u64) -> Result<ModelParams> {
        match *self {
            AttackSpec::SignFlip { scale } => sign_flip(params, scale),
            AttackSpec::SameValue { value } => same_value(params, value),
            AttackSpec::AdditiveGaussian { noise_std } => additive_gaussian(params, noise_std, seed),
            _ => Ok(params.clone()),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("poisoned fraction {fraction} must lie in (0, 1]")))
    }
}

/// `⌈fraction · n⌉` distinct indices drawn from `candidates`, sorted.
fn select(candidates: &[usize], fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let take = ((fraction * candidates.len() as f64).ceil() as usize).min(candidates.len());
    let mut picked = candidates.to_vec();
    picked.shuffle(rng);
    picked.truncate(take);
    picked.sort_unstable();
    picked
}

fn add_feature_noise(ds: &mut Dataset, indices: &[usize], noise_std: f64, seed: u64) {
    if noise_std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, noise_std).expect("validated std");
    let mut rng = seed::rng(seed::derive_seed(seed, "feature_noise", &[]));
    for &i in indices {
        for v in &mut ds.samples[i].features {
            *v += normal.sample(&mut rng);
        }
    }
}

fn flip_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    check_fraction(fraction)?;
    let c = ds.num_classes;
    if c < 2 {
        return Err(Error::InvalidArgument("label flipping needs at least 2 classes".into()));
    }
    let mut rng = seed::rng(seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    let chosen = select(&all, fraction, &mut rng);
    let mut out = ds.clone();
    for &i in &chosen {
        let s = &mut out.samples[i];
        s.label = (s.label + 1 + rng.gen_range(0..c - 1)) % c;
    }
    Ok((out, chosen))
}

/// Relabels `⌈fraction · n⌉` random samples with a uniformly drawn different
/// label.
pub fn random_label_flip(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    Ok(flip_labels(ds, fraction, seed)?.0)
}

/// Same selection and relabeling as [`random_label_flip`] with the same seed,
/// plus `N(0, noise_std²)` noise on the selected samples' features.
pub fn random_label_and_feature(ds: &Dataset, fraction: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std {noise_std} must be >= 0")));
    }
    let (mut out, chosen) = flip_labels(ds, fraction, seed)?;
    add_feature_noise(&mut out, &chosen, noise_std, seed);
    Ok(out)
}

/// Among samples labeled `class_a` or `class_b`, relabels a random
/// `fraction` of them to the other class of the pair.
pub fn label_swap(ds: &Dataset, class_a: usize, class_b: usize, fraction: f64, seed: u64) -> Result<Dataset> {
    check_fraction(fraction)?;
    if class_a == class_b {
        return Err(Error::InvalidArgument("swap classes must differ".into()));
    }
    let counts = ds.class_counts();
    for class in [class_a, class_b] {
        if counts.get(class).copied().unwrap_or(0) == 0 {
            return Err(Error::InvalidArgument(format!("class {class} is not present")));
        }
    }
    let pair: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.samples[i].label == class_a || ds.samples[i].label == class_b)
        .collect();
    let chosen = select(&pair, fraction, &mut seed::rng(seed));
    let mut out = ds.clone();
    for &i in &chosen {
        let s = &mut out.samples[i];
        s.label = if s.label == class_a { class_b } else { class_a };
    }
    Ok(out)
}

/// Adds `N(0, noise_std²)` to every feature of a random `fraction` of samples.
pub fn feature_poison(ds: &Dataset, fraction: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    check_fraction(fraction)?;
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std {noise_std} must be > 0")));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let chosen = select(&all, fraction, &mut seed::rng(seed));
    let mut out = ds.clone();
    add_feature_noise(&mut out, &chosen, noise_std, seed);
    Ok(out)
}

/// `w → −scale · w` for every weight and bias.
pub fn sign_flip(params: &ModelParams, scale: f64) -> Result<ModelParams> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("sign-flip scale {scale} must be >= 1")));
    }
    Ok(params.map(|w| -scale * w))
}

/// Every parameter set to `value`.
pub fn same_value(params: &ModelParams, value: f64) -> Result<ModelParams> {
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("value {value} must be finite")));
    }
    Ok(params.map(|_| value))
}

/// i.i.d. `N(0, noise_std²)` added to every parameter.
pub fn additive_gaussian(params: &ModelParams, noise_std: f64, seed: u64) -> Result<ModelParams> {
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std {noise_std} must be > 0")));
    }
    let normal = Normal::new(0.0, noise_std).expect("validated std");
    let mut rng = seed::rng(seed);
    let mut out = params.clone();
    for v in out.values_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Local training with the update direction reversed.
pub fn gradient_ascent(
    arch: &ArchSpec,
    ds: &Dataset,
    global: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    nn::train(arch, global, ds, cfg, seed, Direction::Ascent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::nn::{init_params, Tensor};

    fn ds() -> Dataset {
        synth_dataset(5, 20, 16, 0.5, 1).unwrap()
    }

    #[test]
    fn full_flip_with_two_classes_swaps_everything() {
        let d = synth_dataset(2, 10, 4, 0.1, 0).unwrap();
        let out = random_label_flip(&d, 1.0, 3).unwrap();
        for (a, b) in d.samples.iter().zip(&out.samples) {
            assert_eq!(b.label, 1 - a.label);
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn half_flip_changes_exactly_half() {
        let d = ds();
        let out = random_label_flip(&d, 0.5, 9).unwrap();
        let changed = d.samples.iter().zip(&out.samples).filter(|(a, b)| a.label != b.label).count();
        assert_eq!(changed, 50);
    }

    #[test]
    fn flip_needs_two_classes() {
        let d = synth_dataset(1, 4, 4, 0.1, 0).unwrap();
        assert!(random_label_flip(&d, 1.0, 0).is_err());
        assert!(random_label_flip(&ds(), 0.0, 0).is_err());
    }

    #[test]
    fn rlf_without_noise_is_rl() {
        let d = ds();
        assert_eq!(
            random_label_and_feature(&d, 0.3, 0.0, 5).unwrap(),
            random_label_flip(&d, 0.3, 5).unwrap()
        );
    }

    #[test]
    fn rlf_leaves_unselected_samples_alone() {
        let d = ds();
        let out = random_label_and_feature(&d, 0.4, 2.0, 5).unwrap();
        let mut untouched = 0;
        for (a, b) in d.samples.iter().zip(&out.samples) {
            if a.label == b.label {
                assert_eq!(a.features, b.features);
                untouched += 1;
            } else {
                assert_ne!(a.features, b.features);
            }
        }
        assert_eq!(untouched, 60);
    }

    #[test]
    fn label_swap_laws() {
        let d = ds();
        let once = label_swap(&d, 1, 3, 1.0, 2).unwrap();
        assert_eq!(label_swap(&once, 1, 3, 1.0, 2).unwrap(), d);
        let partial = label_swap(&d, 1, 3, 0.5, 2).unwrap();
        let (c0, c1) = (d.class_counts(), partial.class_counts());
        assert_eq!(c0[1] + c0[3], c1[1] + c1[3]);
        for (a, b) in d.samples.iter().zip(&partial.samples) {
            assert_eq!(a.features, b.features);
            if a.label != 1 && a.label != 3 {
                assert_eq!(a.label, b.label);
            }
        }
        let missing = synth_dataset(2, 3, 4, 0.1, 0).unwrap();
        assert!(label_swap(&missing, 0, 4, 1.0, 0).is_err());
        assert!(label_swap(&d, 2, 2, 1.0, 0).is_err());
    }

    #[test]
    fn feature_poison_keeps_labels() {
        let d = ds();
        let out = feature_poison(&d, 1.0, 1.0, 4).unwrap();
        for (a, b) in d.samples.iter().zip(&out.samples) {
            assert_eq!(a.label, b.label);
            assert_ne!(a.features, b.features);
        }
        assert!(feature_poison(&d, 0.0, 1.0, 4).is_err());
        assert!(feature_poison(&d, 1.0, 0.0, 4).is_err());
    }

    #[test]
    fn sign_flip_formula() {
        let p = ModelParams {
            layers: vec![crate::nn::LayerParams {
                weights: Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(),
                biases: Tensor::new(vec![0], vec![]).unwrap(),
            }],
        };
        assert_eq!(sign_flip(&p, 3.0).unwrap().flatten(), vec![-3.0, 6.0]);
        assert_eq!(sign_flip(&sign_flip(&p, 1.0).unwrap(), 1.0).unwrap(), p);
        assert!(sign_flip(&p, 0.5).is_err());
    }

    #[test]
    fn sign_flip_scales_norm() {
        let p = init_params(&ArchSpec::default(), 1).unwrap();
        let out = sign_flip(&p, 3.0).unwrap();
        assert!((out.l2_norm() - 3.0 * p.l2_norm()).abs() < 1e-9 * p.l2_norm());
    }

    #[test]
    fn same_value_sets_everything() {
        let p = init_params(&ArchSpec::default(), 1).unwrap();
        let out = same_value(&p, 100.0).unwrap();
        assert!(out.values().all(|&v| v == 100.0));
        assert!(out.same_shape(&p));
        assert_eq!(same_value(&out, 100.0).unwrap(), out);
        assert!(same_value(&p, f64::NAN).is_err());
    }

    #[test]
    fn additive_gaussian_is_seeded_and_vanishes_with_tiny_std() {
        let p = init_params(&ArchSpec::default(), 1).unwrap();
        let a = additive_gaussian(&p, 0.1, 7).unwrap();
        assert_eq!(a, additive_gaussian(&p, 0.1, 7).unwrap());
        assert_ne!(a, additive_gaussian(&p, 0.1, 8).unwrap());
        let tiny = additive_gaussian(&p, 1e-12, 7).unwrap();
        let max = tiny.values().zip(p.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 1e-10);
        assert!(additive_gaussian(&p, 0.0, 7).is_err());
    }

    #[test]
    fn attack_spec_parsing_and_validation() {
        let spec: AttackSpec = serde_json::from_str(r#"{"kind":"SV"}"#).unwrap();
        assert_eq!(spec, AttackSpec::SameValue { value: 100.0 });
        let spec: AttackSpec = serde_json::from_str(r#"{"kind":"LS","swap_pair":[2,4],"fraction":0.5}"#).unwrap();
        assert_eq!(spec.code(), "LS");
        assert!(spec.validate(5).is_ok());
        assert!(spec.validate(4).is_err());
        assert!(serde_json::from_str::<AttackSpec>(r#"{"kind":"SF","value":3}"#).is_err());
        assert_eq!(AttackSpec::SignFlip { scale: 0.5 }.validate(5).unwrap_err().0, "scale");
        assert_eq!(AttackSpec::all_defaults().len(), 8);
    }
}
