//! Minimal 1-D CNN: a stack of valid-padding convolutions with ReLU, optional
//! hidden dense layers with ReLU, and a softmax output layer.
//!
//! Backpropagation is hand-written. The post-ReLU output of the last
//! convolution is exposed as the activation tap used by the auditor.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

/// Shape of the network shared by the global, local and reference models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_length: usize,
    pub num_classes: usize,
    pub conv_layers: Vec<ConvSpec>,
    #[serde(default)]
    pub dense_layers: Vec<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_length: 32,
            num_classes: 5,
            // A single conv layer keeps the tapped features of independently
            // trained benign models close to each other; deeper taps drift
            // apart under SGD noise and inflate benign poisoned rates.
            conv_layers: vec![ConvSpec {
                filters: 8,
                kernel_size: 7,
                stride: 1,
            }],
            dense_layers: vec![16],
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.input_length == 0 {
            return bad("input_length must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.conv_layers.is_empty() {
            return bad("at least one convolutional layer is required".into());
        }
        let mut len = self.input_length;
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.filters == 0 || c.kernel_size == 0 || c.stride == 0 {
                return bad(format!("conv layer {i}: filters, kernel_size and stride must be positive"));
            }
            if c.kernel_size > len {
                return bad(format!(
                    "conv layer {i}: kernel_size {} exceeds input length {len}",
                    c.kernel_size
                ));
            }
            len = (len - c.kernel_size) / c.stride + 1;
        }
        if self.dense_layers.iter().any(|&u| u == 0) {
            return bad("dense layer unit counts must be positive".into());
        }
        Ok(())
    }

    /// Output length of each convolution, in order.
    pub fn conv_output_lengths(&self) -> Vec<usize> {
        let mut len = self.input_length;
        self.conv_layers
            .iter()
            .map(|c| {
                len = (len - c.kernel_size) / c.stride + 1;
                len
            })
            .collect()
    }

    /// Index (into the parameter layers) of the last convolution.
    pub fn tap_layer_index(&self) -> usize {
        self.conv_layers.len() - 1
    }

    /// Flattened length `j` of the tapped activation map.
    pub fn tap_width(&self) -> usize {
        let last = self.conv_output_lengths().last().copied().unwrap_or(0);
        last * self.conv_layers.last().map_or(0, |c| c.filters)
    }

    /// `(weight shape, bias length)` for every parameter layer.
    pub fn layer_shapes(&self) -> Vec<(Vec<usize>, usize)> {
        let mut shapes = Vec::new();
        let mut channels = 1;
        for c in &self.conv_layers {
            shapes.push((vec![c.filters, channels, c.kernel_size], c.filters));
            channels = c.filters;
        }
        let mut width = self.tap_width();
        for &units in &self.dense_layers {
            shapes.push((vec![units, width], units));
            width = units;
        }
        shapes.push((vec![self.num_classes, width], self.num_classes));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .sum()
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

/// Parameters of one network, layer by layer (convolutions, hidden dense
/// layers, output layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros_for(arch: &ArchSpec) -> Self {
        ModelParams {
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(w, b)| LayerParams {
                    weights: Tensor::zeros(w),
                    biases: Tensor::zeros(vec![b]),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data.len() + l.biases.data.len())
            .sum()
    }

    /// All tensors in storage order: `w0, b0, w1, b1, …`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.biases])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.biases])
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Same shapes as `self`, values taken from `flat`.
    pub fn with_values(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for a model with {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        for (dst, src) in out.values_mut().zip(flat) {
            *dst = *src;
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ModelParams {
        let mut out = self.clone();
        for v in out.values_mut() {
            *v = f(*v);
        }
        out
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.shape == b.shape)
    }

    pub fn matches(&self, arch: &ArchSpec) -> bool {
        let shapes = arch.layer_shapes();
        self.layers.len() == shapes.len()
            && self
                .layers
                .iter()
                .zip(&shapes)
                .all(|(l, (w, b))| &l.weights.shape == w && l.biases.shape == [*b])
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check(&self, arch: &ArchSpec) -> Result<()> {
        if self.matches(arch) {
            Ok(())
        } else {
            Err(Error::Dimension("parameters do not match the architecture".into()))
        }
    }
}

/// He-uniform weights (`U(±√(6 / fan_in))`), zero biases.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = seed::rng(seed);
    let mut params = ModelParams::zeros_for(arch);
    for layer in &mut params.layers {
        let fan_in: usize = layer.weights.shape[1..].iter().product();
        let limit = (6.0 / fan_in as f64).sqrt();
        for w in &mut layer.weights.data {
            *w = rng.gen_range(-limit..limit);
        }
    }
    Ok(params)
}

/// Result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TapRecord {
    /// Post-ReLU output of the last convolution, flattened filter-major
    /// (`filter · len + position`).
    pub activations: Vec<f64>,
    /// Probability assigned to the sample's own label.
    pub class_prob: f64,
    pub probs: Vec<f64>,
}

/// Intermediate values of a forward pass kept for backprop.
struct Trace {
    /// Post-ReLU outputs: one per convolution, then one per hidden dense layer.
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn conv_forward(
    input: &[f64],
    in_len: usize,
    spec: &ConvSpec,
    out_len: usize,
    layer: &LayerParams,
) -> Vec<f64> {
    let in_ch = layer.weights.shape[1];
    let k = spec.kernel_size;
    let w = &layer.weights.data;
    let mut out = vec![0.0; spec.filters * out_len];
    for f in 0..spec.filters {
        let bias = layer.biases.data[f];
        for p in 0..out_len {
            let start = p * spec.stride;
            let mut acc = bias;
            for c in 0..in_ch {
                let wrow = &w[(f * in_ch + c) * k..(f * in_ch + c + 1) * k];
                let xrow = &input[c * in_len + start..c * in_len + start + k];
                acc += wrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
            }
            out[f * out_len + p] = acc;
        }
    }
    out
}

fn dense_forward(input: &[f64], layer: &LayerParams) -> Vec<f64> {
    let n_in = layer.weights.shape[1];
    layer
        .weights
        .data
        .chunks_exact(n_in)
        .zip(&layer.biases.data)
        .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if !(*x > 0.0) && !x.is_nan() {
            *x = 0.0;
        }
    }
}

fn forward_trace(arch: &ArchSpec, params: &ModelParams, x: &[f64]) -> Trace {
    let out_lens = arch.conv_output_lengths();
    let mut hidden = Vec::with_capacity(params.layers.len() - 1);
    let mut in_len = arch.input_length;
    let mut current = x.to_vec();
    for (i, spec) in arch.conv_layers.iter().enumerate() {
        let mut z = conv_forward(&current, in_len, spec, out_lens[i], &params.layers[i]);
        relu_in_place(&mut z);
        in_len = out_lens[i];
        hidden.push(z.clone());
        current = z;
    }
    let n_conv = arch.conv_layers.len();
    for layer in &params.layers[n_conv..params.layers.len() - 1] {
        let mut z = dense_forward(&current, layer);
        relu_in_place(&mut z);
        hidden.push(z.clone());
        current = z;
    }
    let logits = dense_forward(&current, params.layers.last().expect("output layer"));
    Trace { hidden, logits }
}

/// Max-subtracted softmax. Non-finite logits propagate as NaN.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log softmax(logits)[label]` computed without forming probabilities.
fn nll(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

fn check_input(arch: &ArchSpec, x: &[f64], label: usize) -> Result<()> {
    if x.len() != arch.input_length {
        return Err(Error::Dimension(format!(
            "input has length {}, architecture expects {}",
            x.len(),
            arch.input_length
        )));
    }
    if label >= arch.num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} >= num_classes {}",
            arch.num_classes
        )));
    }
    Ok(())
}

/// Forward pass for one sample, tapping the last convolution.
pub fn forward(arch: &ArchSpec, params: &ModelParams, x: &[f64], label: usize) -> Result<TapRecord> {
    params.check(arch)?;
    check_input(arch, x, label)?;
    let trace = forward_trace(arch, params, x);
    let probs = softmax(&trace.logits);
    Ok(TapRecord {
        activations: trace.hidden[arch.tap_layer_index()].clone(),
        class_prob: probs[label],
        probs,
    })
}

/// Index of the largest probability; ties go to the lowest class.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(arch: &ArchSpec, params: &ModelParams, x: &[f64]) -> Result<usize> {
    params.check(arch)?;
    check_input(arch, x, 0)?;
    Ok(argmax(&forward_trace(arch, params, x).logits))
}

/// Mean cross-entropy over `batch` and its gradient, shaped like `params`.
pub fn loss_and_grad(
    arch: &ArchSpec,
    params: &ModelParams,
    batch: &[(&[f64], usize)],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    params.check(arch)?;
    for (x, label) in batch {
        check_input(arch, x, *label)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ModelParams::zeros_for(arch);
    let mut loss = 0.0;
    for (x, label) in batch {
        loss += nll(&forward_and_backward(arch, params, x, *label, scale, &mut grads), *label);
    }
    Ok((loss * scale, grads))
}

/// Runs one sample forward, accumulates `scale · ∂loss/∂θ` into `grads`, and
/// returns the logits.
fn forward_and_backward(
    arch: &ArchSpec,
    params: &ModelParams,
    x: &[f64],
    label: usize,
    scale: f64,
    grads: &mut ModelParams,
) -> Vec<f64> {
    let trace = forward_trace(arch, params, x);
    let n_layers = params.layers.len();
    let n_conv = arch.conv_layers.len();

    let mut delta = softmax(&trace.logits);
    delta[label] -= 1.0;
    for d in &mut delta {
        *d *= scale;
    }

    // Dense layers, output first.
    for li in (n_conv..n_layers).rev() {
        let input = &trace.hidden[li - 1];
        let layer = &params.layers[li];
        let grad = &mut grads.layers[li];
        let n_in = layer.weights.shape[1];
        let mut d_input = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.biases.data[o] += d;
            let wrow = &layer.weights.data[o * n_in..(o + 1) * n_in];
            let grow = &mut grad.weights.data[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += d * input[i];
                d_input[i] += d * wrow[i];
            }
        }
        // ReLU of the layer that produced `input`.
        for (di, &a) in d_input.iter_mut().zip(input) {
            if a <= 0.0 {
                *di = 0.0;
            }
        }
        delta = d_input;
    }

    // Convolutions, last first.
    let out_lens = arch.conv_output_lengths();
    for li in (0..n_conv).rev() {
        let spec = &arch.conv_layers[li];
        let (input, in_len): (&[f64], usize) = if li == 0 {
            (x, arch.input_length)
        } else {
            (&trace.hidden[li - 1], out_lens[li - 1])
        };
        let out_len = out_lens[li];
        let layer = &params.layers[li];
        let grad = &mut grads.layers[li];
        let in_ch = layer.weights.shape[1];
        let k = spec.kernel_size;
        let mut d_input = if li > 0 { vec![0.0; in_ch * in_len] } else { Vec::new() };
        for f in 0..spec.filters {
            for p in 0..out_len {
                let d = delta[f * out_len + p];
                if d == 0.0 {
                    continue;
                }
                grad.biases.data[f] += d;
                let start = p * spec.stride;
                for c in 0..in_ch {
                    let base_w = (f * in_ch + c) * k;
                    let base_x = c * in_len + start;
                    for t in 0..k {
                        grad.weights.data[base_w + t] += d * input[base_x + t];
                        if li > 0 {
                            d_input[base_x + t] += d * layer.weights.data[base_w + t];
                        }
                    }
                }
            }
        }
        if li > 0 {
            for (di, &a) in d_input.iter_mut().zip(input) {
                if a <= 0.0 {
                    *di = 0.0;
                }
            }
            delta = d_input;
        }
    }
    trace.logits
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 0.05,
            batch_size: 16,
        }
    }
}

/// One SGD update on one batch. `lr` may have either sign: descent moves by
/// `−lr·g`, ascent by `+lr·g`.
pub fn sgd_step(
    arch: &ArchSpec,
    params: &mut ModelParams,
    batch: &[(&[f64], usize)],
    lr: f64,
    direction: Direction,
) -> Result<f64> {
    if !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {lr} is not finite")));
    }
    let (loss, grads) = loss_and_grad(arch, params, batch)?;
    for (p, g) in params.values_mut().zip(grads.values()) {
        match direction {
            Direction::Descent => *p -= lr * g,
            Direction::Ascent => *p += lr * g,
        }
    }
    Ok(loss)
}

/// Mini-batch SGD. Each epoch reshuffles with a stream derived from `seed`;
/// `epochs = 0` returns the input unchanged.
pub fn train(
    arch: &ArchSpec,
    params: &ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    direction: Direction,
) -> Result<ModelParams> {
    if ds.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    params.check(arch)?;
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed::derive_seed(seed, "epoch", &[epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (ds.samples[i].features.as_slice(), ds.samples[i].label))
                .collect();
            sgd_step(arch, &mut params, &batch, cfg.lr, direction)?;
        }
    }
    Ok(params)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(arch: &ArchSpec, params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0usize;
    for s in &ds.samples {
        if predict(arch, params, &s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean cross-entropy over a whole dataset.
pub fn dataset_loss(arch: &ArchSpec, params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    params.check(arch)?;
    let mut total = 0.0;
    for s in &ds.samples {
        check_input(arch, &s.features, s.label)?;
        total += nll(&forward_trace(arch, params, &s.features).logits, s.label);
    }
    Ok(total / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Sample};

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input_length: 10,
            num_classes: 3,
            conv_layers: vec![
                ConvSpec {
                    filters: 2,
                    kernel_size: 3,
                    stride: 1,
                },
                ConvSpec {
                    filters: 3,
                    kernel_size: 2,
                    stride: 2,
                },
            ],
            dense_layers: vec![4],
        }
    }

    #[test]
    fn arch_shapes() {
        let arch = ArchSpec::default();
        assert_eq!(arch.conv_output_lengths(), vec![26]);
        assert_eq!(arch.tap_width(), 208);
        assert_eq!(arch.tap_layer_index(), 0);
        assert_eq!(arch.param_count(), 8 * 7 + 8 + 208 * 16 + 16 + 16 * 5 + 5);
        let deep = tiny_arch();
        assert_eq!(deep.conv_output_lengths(), vec![8, 4]);
        assert_eq!(deep.tap_width(), 12);
        assert_eq!(deep.tap_layer_index(), 1);
        for arch in [arch, deep] {
            let p = init_params(&arch, 0).unwrap();
            assert_eq!(p.num_params(), arch.param_count());
            assert!(p.matches(&arch));
        }
    }

    #[test]
    fn arch_validation() {
        let mut arch = tiny_arch();
        arch.conv_layers[1].kernel_size = 20;
        assert!(arch.validate().is_err());
        let mut arch = tiny_arch();
        arch.conv_layers.clear();
        assert!(arch.validate().is_err());
        let mut arch = tiny_arch();
        arch.num_classes = 1;
        assert!(arch.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = tiny_arch();
        let a = init_params(&arch, 1).unwrap();
        assert_eq!(a, init_params(&arch, 1).unwrap());
        assert_ne!(a, init_params(&arch, 2).unwrap());
        assert!(a.layers.iter().all(|l| l.biases.data.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_output_layer_gives_uniform_probs() {
        let arch = tiny_arch();
        let mut p = init_params(&arch, 3).unwrap();
        let out = p.layers.last_mut().unwrap();
        out.weights.data.fill(0.0);
        out.biases.data.fill(0.0);
        let rec = forward(&arch, &p, &[0.3; 10], 1).unwrap();
        for pr in &rec.probs {
            assert!((pr - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(rec.activations.len(), arch.tap_width());
    }

    #[test]
    fn identity_conv_taps_the_input() {
        let arch = ArchSpec {
            input_length: 3,
            num_classes: 2,
            conv_layers: vec![ConvSpec {
                filters: 1,
                kernel_size: 1,
                stride: 1,
            }],
            dense_layers: vec![],
        };
        let mut p = ModelParams::zeros_for(&arch);
        p.layers[0].weights.data[0] = 1.0;
        let rec = forward(&arch, &p, &[1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(rec.activations, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let probs = softmax(&[1e4, -1e4, 0.0, 9999.0]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(nll(&[1e4, -1e4], 1).is_finite());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let arch = tiny_arch();
        let p = init_params(&arch, 0).unwrap();
        assert!(forward(&arch, &p, &[0.0; 9], 0).is_err());
        assert!(forward(&arch, &p, &[0.0; 10], 3).is_err());
        let other = init_params(&ArchSpec::default(), 0).unwrap();
        assert!(forward(&arch, &other, &[0.0; 10], 0).is_err());
    }

    #[test]
    fn uniform_loss_is_ln_c() {
        let arch = ArchSpec {
            num_classes: 5,
            ..tiny_arch()
        };
        let mut p = init_params(&arch, 0).unwrap();
        let out = p.layers.last_mut().unwrap();
        out.weights.data.fill(0.0);
        let x = [0.5; 10];
        let (loss, _) = loss_and_grad(&arch, &p, &[(&x, 2)]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_keeps_loss_and_grads() {
        let arch = tiny_arch();
        let p = init_params(&arch, 5).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|i| (0..10).map(|t| ((i * 10 + t) as f64).sin()).collect()).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
        let doubled: Vec<(&[f64], usize)> = batch.iter().flat_map(|b| [*b, *b]).collect();
        let (l1, g1) = loss_and_grad(&arch, &p, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&arch, &p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.values().zip(g2.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let arch = tiny_arch();
        let p = init_params(&arch, 5).unwrap();
        assert!(loss_and_grad(&arch, &p, &[]).is_err());
    }

    #[test]
    fn ascent_mirrors_descent_with_negated_lr() {
        let arch = tiny_arch();
        let p = init_params(&arch, 8).unwrap();
        let x: Vec<f64> = (0..10).map(|t| (t as f64 * 0.7).cos()).collect();
        let batch = [(x.as_slice(), 1)];
        let mut a = p.clone();
        let mut d = p.clone();
        sgd_step(&arch, &mut a, &batch, 0.1, Direction::Ascent).unwrap();
        sgd_step(&arch, &mut d, &batch, -0.1, Direction::Descent).unwrap();
        assert_eq!(a, d);
        assert_ne!(a, p);
    }

    #[test]
    fn train_argument_checks() {
        let arch = tiny_arch();
        let p = init_params(&arch, 0).unwrap();
        let ds = synth_dataset(3, 5, 10, 0.1, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train(&arch, &p, &ds, &cfg, 1, Direction::Descent).unwrap(), p);
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&arch, &p, &ds, &bad, 1, Direction::Descent).is_err());
        let empty = Dataset {
            samples: vec![],
            num_classes: 3,
        };
        assert!(train(&arch, &p, &empty, &TrainConfig::default(), 1, Direction::Descent).is_err());
    }

    #[test]
    fn train_separates_two_classes() {
        // Class 0 ramps up, class 1 ramps down, with jitter.
        let arch = ArchSpec {
            input_length: 8,
            num_classes: 2,
            conv_layers: vec![ConvSpec {
                filters: 2,
                kernel_size: 3,
                stride: 1,
            }],
            dense_layers: vec![],
        };
        let mut rng = seed::rng(3);
        let samples: Vec<Sample> = (0..60)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 0 { 1.0 } else { -1.0 };
                let features = (0..8)
                    .map(|t| sign * (t as f64 - 3.5) / 4.0 + rng.gen_range(-0.2..0.2))
                    .collect();
                Sample { features, label }
            })
            .collect();
        let ds = Dataset::new(samples, 2).unwrap();
        let p = init_params(&arch, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            lr: 0.1,
            batch_size: 8,
        };
        let trained = train(&arch, &p, &ds, &cfg, 2, Direction::Descent).unwrap();
        assert!(evaluate(&arch, &trained, &ds).unwrap() >= 0.95);
        assert_eq!(trained, train(&arch, &p, &ds, &cfg, 2, Direction::Descent).unwrap());
    }

    #[test]
    fn evaluate_single_correct_sample() {
        let arch = tiny_arch();
        let mut p = ModelParams::zeros_for(&arch);
        // bias alone decides: class 2
        p.layers.last_mut().unwrap().biases.data[2] = 1.0;
        let ds = Dataset::new(vec![Sample { features: vec![0.0; 10], label: 2 }], 3).unwrap();
        assert_eq!(evaluate(&arch, &p, &ds).unwrap(), 1.0);
        // all-zero logits tie → class 0
        let zero = ModelParams::zeros_for(&arch);
        assert_eq!(predict(&arch, &zero, &[0.0; 10]).unwrap(), 0);
    }

    #[test]
    fn random_model_is_near_chance() {
        let arch = ArchSpec::default();
        let ds = synth_dataset(5, 200, 32, 1.0, 17).unwrap();
        let p = init_params(&arch, 4).unwrap();
        let acc = evaluate(&arch, &p, &ds).unwrap();
        assert!((0.1..=0.35).contains(&acc), "accuracy {acc}");
        assert_eq!(acc, evaluate(&arch, &p, &ds).unwrap());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = tiny_arch();
        let mut p = init_params(&arch, 5).unwrap();
        // Nonzero biases keep pre-activations away from the ReLU kink.
        for (i, b) in p.layers.iter_mut().flat_map(|l| l.biases.data.iter_mut()).enumerate() {
            *b = 0.05 * (i as f64 + 1.0).sin();
        }
        let ds = synth_dataset(3, 2, 10, 0.5, 8).unwrap();
        let batch: Vec<(&[f64], usize)> = ds.samples.iter().map(|s| (s.features.as_slice(), s.label)).collect();
        let (_, grads) = loss_and_grad(&arch, &p, &batch).unwrap();
        let flat = p.flatten();
        let eps = 1e-5;
        for (i, g) in grads.flatten().into_iter().enumerate() {
            let mut plus = flat.clone();
            plus[i] += eps;
            let mut minus = flat.clone();
            minus[i] -= eps;
            let lp = loss_and_grad(&arch, &p.with_values(&plus).unwrap(), &batch).unwrap().0;
            let lm = loss_and_grad(&arch, &p.with_values(&minus).unwrap(), &batch).unwrap().0;
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {i}: analytic {g}, numeric {numeric}");
        }
    }
}
