//! Deterministic dense feed-forward network: forward/backward passes,
//! tempered softmax, soft-target cross entropy, SGD with momentum and weight
//! decay, and finite-difference gradient verification.
//!
//! Hidden layers use a rectifier; the last layer emits raw logits. Weights are
//! row-major `(out, in)`.
//!
//! The softmax used everywhere is the standard normalized one,
//! `exp(u_j) / sum_c exp(u_c)`. A variant whose denominator skips the `j`-th
//! term appears in some write-ups of this method; it does not produce a
//! probability distribution and is not implemented.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Lower clamp applied to probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Samples per work unit when a batch is split across threads.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `(outputs, inputs)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.inputs..(r + 1) * self.inputs]
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.outputs).map(|r| dot(self.row(r), x) + self.bias[r]));
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::invalid(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs {
                return Err(Error::Shape {
                    what: "layer weights",
                    expected: l.inputs * l.outputs,
                    actual: l.weights.len(),
                });
            }
            if l.bias.len() != l.outputs {
                return Err(Error::Shape {
                    what: "layer bias",
                    expected: l.outputs,
                    actual: l.bias.len(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.inputs != l.outputs {
                    return Err(Error::Shape {
                        what: "consecutive layer dims",
                        expected: l.outputs,
                        actual: next.inputs,
                    });
                }
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized MLP `input -> hidden... -> classes`, zero biases.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        let layers = dims
            .windows(2)
            .map(|w| {
                let mut layer = Layer::zeros(w[0], w[1]);
                let std = (2.0 / w[0].max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in &mut layer.weights {
                    *v = normal.sample(rng);
                }
                layer
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn final_layer(&self) -> &Layer {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i < last {
                relu_in_place(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Activation vector feeding the final linear layer.
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.layers.len() < 2 {
            return Err(Error::invalid(
                "single-layer network has no penultimate representation",
            ));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.affine(&cur, &mut next);
            relu_in_place(&mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Activations of every layer: `acts[0]` is the input, `acts[L]` the logits.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.affine(&acts[i], &mut out);
            if i < last {
                relu_in_place(&mut out);
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulate into `grads` the parameter gradient given `d_logits`.
    fn backward(&self, acts: &[Vec<f64>], d_logits: Vec<f64>, grads: &mut Gradients) {
        let mut delta = d_logits;
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &acts[li];
            let g = &mut grads.layers[li];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                let row = &mut g.weights[r * layer.inputs..(r + 1) * layer.inputs];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(layer.row(r)) {
                    *p += w * d;
                }
            }
            // Rectifier derivative: the post-activation is zero exactly where
            // the pre-activation was non-positive.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Flat view of parameter `index` in `(layer, weights..., bias...)` order.
    pub fn param(&self, index: usize) -> f64 {
        let (l, i) = self.locate(index);
        let layer = &self.layers[l];
        if i < layer.weights.len() {
            layer.weights[i]
        } else {
            layer.bias[i - layer.weights.len()]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, i) = self.locate(index);
        let layer = &mut self.layers[l];
        let nw = layer.weights.len();
        if i < nw {
            layer.weights[i] = value;
        } else {
            layer.bias[i - nw] = value;
        }
    }

    /// `(layer, offset within layer)` of a flat parameter index.
    pub fn locate(&self, mut index: usize) -> (usize, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if index < layer.num_params() {
                return (l, index);
            }
            index -= layer.num_params();
        }
        panic!("parameter index out of range");
    }

    /// Little-endian `CLNN` checkpoint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("expected magic \"CLNN\", found {magic:?}"),
            });
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push((cur.u32()? as usize, cur.u32()? as usize));
        }
        let mut layers = Vec::with_capacity(count);
        for (inputs, outputs) in dims {
            let mut layer = Layer::zeros(inputs, outputs);
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = cur.f64()?;
            }
            layers.push(layer);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse {
                offset: cur.pos,
                msg: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Self::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CLNN";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Sidecar metadata written next to a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient with the same layout as a [`Network`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    /// Values in flat parameter order (see [`Network::param`]).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut index = index;
        for l in &mut self.layers {
            let n = l.weights.len() + l.bias.len();
            if index < n {
                if index < l.weights.len() {
                    l.weights[index] = value;
                } else {
                    l.bias[index - l.weights.len()] = value;
                }
                return;
            }
            index -= n;
        }
        panic!("gradient index out of range");
    }

    fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len()
            })
    }
}

/// Feature rows paired with probability-vector targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("batch dims must be positive"));
        }
        if features.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if features.len() % dim != 0 {
            return Err(Error::Shape {
                what: "batch features",
                expected: dim,
                actual: features.len() % dim,
            });
        }
        let n = features.len() / dim;
        if targets.len() != n * classes {
            return Err(Error::Shape {
                what: "batch targets",
                expected: n * classes,
                actual: targets.len(),
            });
        }
        for (i, row) in targets.chunks(classes).enumerate() {
            check_probability(row).map_err(|m| Error::invalid(format!("target row {i}: {m}")))?;
        }
        Ok(Self {
            features,
            targets,
            dim,
            classes,
        })
    }

    /// Batch with one-hot targets.
    pub fn one_hot(features: Vec<f64>, labels: &[usize], dim: usize, classes: usize) -> Result<Self> {
        let mut targets = vec![0.0; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            targets[i * classes + y] = 1.0;
        }
        Self::new(features, targets, dim, classes)
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

pub(crate) fn check_probability(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err("entries must be finite and nonnegative".into());
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(format!("sums to {s}, expected 1"));
    }
    Ok(())
}

/// Normalized softmax of `z / temperature`.
pub fn softmax_tempered(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if z.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(softmax_unchecked(z, temperature))
}

pub(crate) fn softmax_unchecked(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut out: Vec<f64> = z.iter().map(|&v| (v / temperature - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `-sum_j y_j ln p_j`, with `p` clamped below at [`LOG_CLAMP`].
pub fn cross_entropy_soft(y: &[f64], p: &[f64]) -> Result<f64> {
    if y.len() != p.len() {
        return Err(Error::Shape {
            what: "cross entropy",
            expected: y.len(),
            actual: p.len(),
        });
    }
    Ok(cross_entropy_unchecked(y, p))
}

fn cross_entropy_unchecked(y: &[f64], p: &[f64]) -> f64 {
    -y.iter()
        .zip(p)
        .map(|(&yj, &pj)| yj * pj.max(LOG_CLAMP).ln())
        .sum::<f64>()
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Per-sample training objective: tempered cross entropy plus an optional
/// confidence penalty `-beta * H(p)` on the tempered prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub temperature: f64,
    pub penalty: f64,
}

impl Objective {
    pub fn tempered(temperature: f64) -> Self {
        Self {
            temperature,
            penalty: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.penalty >= 0.0) || !self.penalty.is_finite() {
            return Err(Error::invalid(format!("penalty weight must be >= 0, got {}", self.penalty)));
        }
        Ok(())
    }

    /// Loss of one sample and its gradient w.r.t. the logits, before
    /// averaging over the batch.
    fn sample(&self, logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let t = self.temperature;
        let p = softmax_unchecked(logits, t);
        let mut loss = cross_entropy_unchecked(target, &p);
        // d/dz_j of CE(y, softmax(z/T)) = (p_j - y_j) / T, since sum(y) = 1.
        let mut d: Vec<f64> = p.iter().zip(target).map(|(pj, yj)| (pj - yj) / t).collect();
        if self.penalty > 0.0 {
            let h = entropy(&p);
            loss -= self.penalty * h;
            // d(-beta H)/du_j = beta p_j (ln p_j + H)
            for (dj, &pj) in d.iter_mut().zip(&p) {
                if pj > 0.0 {
                    *dj += self.penalty * pj * (pj.ln() + h) / t;
                }
            }
        }
        (loss, d)
    }
}

/// Summed loss, gradient and correct-prediction count over one batch.
#[derive(Debug, Clone)]
pub struct BatchPass {
    pub loss_sum: f64,
    pub correct: usize,
    pub grads: Gradients,
}

/// Forward and backward pass over rows `features` (row-major, `net.input_dim()`
/// wide) against `targets`. The returned gradient is of the batch **mean**
/// loss. `labels`, when given, are used only to count correct argmax
/// predictions.
///
/// Rows are grouped into [`GRAD_CHUNK`]-sized chunks whose partial sums are
/// combined by a fixed pairwise tree, so the result does not depend on `exec`.
pub fn batch_pass(
    net: &Network,
    features: &[f64],
    targets: &[f64],
    labels: Option<&[usize]>,
    objective: &Objective,
    exec: Exec,
) -> Result<BatchPass> {
    objective.validate()?;
    let d = net.input_dim();
    let c = net.output_dim();
    if features.len() % d != 0 {
        return Err(Error::Shape {
            what: "batch features",
            expected: d,
            actual: features.len() % d,
        });
    }
    let n = features.len() / d;
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if targets.len() != n * c {
        return Err(Error::Shape {
            what: "batch targets",
            expected: n * c,
            actual: targets.len(),
        });
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Shape {
                what: "batch labels",
                expected: n,
                actual: l.len(),
            });
        }
    }
    let scale = 1.0 / n as f64;
    let rows: Vec<usize> = (0..n).collect();
    let parts = par::map_chunks(exec, &rows, GRAD_CHUNK, |chunk| {
        let mut grads = Gradients::zeros_like(net);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for &i in chunk {
            let x = &features[i * d..(i + 1) * d];
            let y = &targets[i * c..(i + 1) * c];
            let acts = net.trace(x);
            let logits = &acts[acts.len() - 1];
            let (loss, mut dz) = objective.sample(logits, y);
            loss_sum += loss;
            if let Some(l) = labels {
                if argmax(logits) == l[i] {
                    correct += 1;
                }
            }
            for v in &mut dz {
                *v *= scale;
            }
            net.backward(&acts, dz, &mut grads);
        }
        BatchPass {
            loss_sum,
            correct,
            grads,
        }
    });
    let total = par::tree_reduce(parts, |mut a, b| {
        a.loss_sum += b.loss_sum;
        a.correct += b.correct;
        a.grads.add_assign(&b.grads);
        a
    })
    .expect("nonempty batch");
    Ok(total)
}

/// Mean tempered cross entropy over the batch and its parameter gradient.
/// No `T^2` rescaling is applied.
pub fn tempered_loss(net: &Network, batch: &Batch, temperature: f64) -> Result<(f64, Gradients)> {
    objective_loss(net, batch, &Objective::tempered(temperature), Exec::Sequential)
}

pub fn objective_loss(
    net: &Network,
    batch: &Batch,
    objective: &Objective,
    exec: Exec,
) -> Result<(f64, Gradients)> {
    check_batch(net, batch)?;
    let pass = batch_pass(net, &batch.features, &batch.targets, None, objective, exec)?;
    Ok((pass.loss_sum / batch.len() as f64, pass.grads))
}

/// Loss only; reuses the forward path without allocating gradients.
pub fn objective_value(net: &Network, batch: &Batch, objective: &Objective) -> Result<f64> {
    check_batch(net, batch)?;
    objective.validate()?;
    let (d, c) = (batch.dim, batch.classes);
    let sum: f64 = (0..batch.len())
        .map(|i| {
            let logits = net.forward(&batch.features[i * d..(i + 1) * d]);
            objective.sample(&logits, &batch.targets[i * c..(i + 1) * c]).0
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

fn check_batch(net: &Network, batch: &Batch) -> Result<()> {
    if batch.dim != net.input_dim() {
        return Err(Error::Shape {
            what: "batch feature dim",
            expected: net.input_dim(),
            actual: batch.dim,
        });
    }
    if batch.classes != net.output_dim() {
        return Err(Error::Shape {
            what: "batch class count",
            expected: net.output_dim(),
            actual: batch.classes,
        });
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// SGD with momentum and decoupled-in-gradient weight decay:
/// `g' = g + wd*p; v = mu*v + g'; p -= lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients,
}

impl OptimizerState {
    pub fn new(net: &Network, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(net),
        })
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }
}

pub fn sgd_step(net: &mut Network, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if !grads.matches(net) || !opt.velocity.matches(net) {
        return Err(Error::Shape {
            what: "gradient layout",
            expected: net.num_params(),
            actual: grads.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum(),
        });
    }
    for (li, g) in grads.layers.iter().enumerate() {
        if let Some(index) = g.weights.iter().chain(&g.bias).position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                epoch: None,
                layer: li,
                index,
            });
        }
    }
    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for ((layer, g), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut opt.velocity.layers) {
        let update = |p: &mut [f64], g: &[f64], v: &mut [f64]| {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        };
        update(&mut layer.weights, &g.weights, &mut v.weights);
        update(&mut layer.bias, &g.bias, &mut v.bias);
    }
    Ok(())
}

/// Largest parameter count [`grad_check`] accepts.
pub const GRAD_CHECK_MAX_PARAMS: usize = 5_000;

/// Denominator floor for relative error, so parameters with near-zero
/// gradient are compared on an absolute scale of `1e-4 * tol`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the parameter with the largest relative error.
    pub worst_index: usize,
    /// `(layer, offset)` of `worst_index`.
    pub worst_location: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn grad_check(
    net: &Network,
    batch: &Batch,
    objective: &Objective,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective_loss(net, batch, objective, Exec::Sequential)?;
    compare_gradients(net, batch, objective, &analytic, step, tolerance)
}

/// Compare a supplied gradient against central differences of the loss.
pub fn compare_gradients(
    net: &Network,
    batch: &Batch,
    objective: &Objective,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient check needs a nonempty batch"));
    }
    if net.num_params() > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::invalid(format!(
            "gradient check limited to {GRAD_CHECK_MAX_PARAMS} parameters, network has {}",
            net.num_params()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    if !analytic.matches(net) {
        return Err(Error::Shape {
            what: "gradient layout",
            expected: net.num_params(),
            actual: analytic.flat().len(),
        });
    }
    let flat = analytic.flat();
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_location: (0, 0),
        analytic: flat[0],
        numeric: f64::NAN,
        params: flat.len(),
        tolerance,
        passed: false,
    };
    for (i, &a) in flat.iter().enumerate() {
        let orig = probe.param(i);
        probe.set_param(i, orig + step);
        let plus = objective_value(&probe, batch, objective)?;
        probe.set_param(i, orig - step);
        let minus = objective_value(&probe, batch, objective)?;
        probe.set_param(i, orig);
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > report.max_rel_error || i == 0 || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.worst_location = net.locate(report.worst_index);
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
