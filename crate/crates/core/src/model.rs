//! Small differentiable classifiers: multinomial logistic regression and a
//! ReLU multilayer perceptron, with mean cross-entropy loss and analytic
//! gradients over a flat parameter vector.
//!
//! Parameter layout is layer by layer: the weight matrix (row-major,
//! `fan_out x fan_in`) followed by its bias vector.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};
use crate::rng::{Purpose, Streams};

/// Flat model parameters `x`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector::new(self.values.iter().map(|v| a * v).collect())
    }

    /// `self - a * other`
    pub fn minus_scaled(&self, a: f64, other: &ParamVector) -> ParamVector {
        ParamVector::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(s, o)| s - a * o)
                .collect(),
        )
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Unweighted mean of a non-empty list of equally sized vectors.
    pub fn mean_of<'a, I>(vectors: I) -> ParamVector
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter.next().expect("mean of an empty set");
        let mut acc = first.clone();
        let mut count = 1usize;
        for v in iter {
            for (a, b) in acc.values.iter_mut().zip(&v.values) {
                *a += b;
            }
            count += 1;
        }
        let n = count as f64;
        for a in &mut acc.values {
            *a /= n;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Logistic => write!(f, "logistic"),
            ModelKind::Mlp => write!(f, "mlp"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(RossError::config(format!(
                "unknown model '{other}' (allowed: logistic, mlp)"
            ))),
        }
    }
}

/// Architecture of the shared classifier `F(x; xi)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden: Vec::new(),
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(RossError::config("model input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(RossError::config("model needs at least 2 classes"));
        }
        match self.kind {
            ModelKind::Logistic if !self.hidden.is_empty() => Err(RossError::config(
                "logistic model takes no hidden layers",
            )),
            ModelKind::Mlp if self.hidden.is_empty() => {
                Err(RossError::config("mlp model needs at least one hidden layer"))
            }
            _ if self.hidden.iter().any(|&h| h == 0) => {
                Err(RossError::config("hidden layer widths must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.num_classes);
        w
    }

    /// `(fan_in, fan_out)` for every layer.
    fn layers(&self) -> Vec<(usize, usize)> {
        self.widths().windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Parameter count `d`.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Ranges of the bias entries in the flat layout.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        let mut out = Vec::new();
        for (fan_in, fan_out) in self.layers() {
            off += fan_in * fan_out;
            out.push(off..off + fan_out);
            off += fan_out;
        }
        out
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(RossError::precondition(format!(
                "parameter vector has length {}, model expects {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.input_dim {
            return Err(RossError::precondition(format!(
                "sample has {} features, model expects {}",
                s.features.len(),
                self.input_dim
            )));
        }
        if s.label >= self.num_classes {
            return Err(RossError::precondition(format!(
                "label {} out of range for {} classes",
                s.label, self.num_classes
            )));
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward_all(&self, params: &[f64], features: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
        acts.push(features.to_vec());
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let weights = &params[off..off + fan_in * fan_out];
            let bias = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let last = l + 1 == layers.len();
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    let z = bias[o] + dot(row, input);
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, params: &ParamVector, features: &[f64]) -> Vec<f64> {
        self.forward_all(&params.values, features)
            .pop()
            .expect("at least one layer")
    }

    /// Argmax class, ties broken toward the lowest index.
    pub fn predict(&self, params: &ParamVector, features: &[f64]) -> usize {
        argmax_lowest(&self.logits(params, features))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Canonical summation order: by label, then features lexicographically.
/// Identical samples compare equal and contribute identical terms.
fn canonical_order(batch: &[Sample]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (&batch[a], &batch[b]);
        sa.label.cmp(&sb.label).then_with(|| {
            for (x, y) in sa.features.iter().zip(&sb.features) {
                match x.total_cmp(y) {
                    Ordering::Equal => continue,
                    other => return other,
                }
            }
            Ordering::Equal
        })
    });
    idx
}

/// Xavier-uniform weights and zero biases, deterministic in `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let key = Streams::new(seed).key(Purpose::Init, 0, 0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-limit..=limit));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values)
}

/// Mean cross-entropy loss over the batch, without the gradient.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(RossError::precondition("loss over an empty batch"));
    }
    spec.check_params(params)?;
    let mut total = 0.0;
    for i in canonical_order(batch) {
        let s = &batch[i];
        spec.check_sample(s)?;
        let z = spec.logits(params, &s.features);
        total += log_sum_exp(&z) - z[s.label];
    }
    let l = total / batch.len() as f64;
    if !l.is_finite() {
        return Err(RossError::numeric("loss evaluation"));
    }
    Ok(l)
}

/// Mean cross-entropy loss and its analytic gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[Sample],
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(RossError::precondition("gradient over an empty batch"));
    }
    spec.check_params(params)?;
    let layers = spec.layers();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for &(fan_in, fan_out) in &layers {
        offsets.push(off);
        off += fan_in * fan_out + fan_out;
    }

    let p = &params.values;
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;
    for i in canonical_order(batch) {
        let s = &batch[i];
        spec.check_sample(s)?;
        let acts = spec.forward_all(p, &s.features);
        let logits = acts.last().expect("logits");
        let lse = log_sum_exp(logits);
        total += lse - logits[s.label];

        // dL/dz for the output layer: softmax - onehot
        let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
        delta[s.label] -= 1.0;

        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out) = layers[l];
            let base = offsets[l];
            let input = &acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                grad[base + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let weights = &p[base..base + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (pv, w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *pv += d * w;
                    }
                }
                // ReLU derivative on the hidden activation
                for (pv, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *pv = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    let n = batch.len() as f64;
    let loss = total / n;
    for g in &mut grad {
        *g /= n;
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(RossError::numeric("loss/gradient evaluation"));
    }
    Ok((loss, ParamVector::new(grad)))
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(RossError::precondition("accuracy over an empty set"));
    }
    spec.check_params(params)?;
    let correct = samples
        .iter()
        .filter(|s| spec.predict(params, &s.features) == s.label)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Central-difference gradient of the mean loss, one coordinate at a time.
pub fn finite_diff_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[Sample],
    eps: f64,
) -> Result<ParamVector> {
    if !(eps > 0.0) {
        return Err(RossError::precondition("finite-difference step must be positive"));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let orig = probe.values[k];
        probe.values[k] = orig + eps;
        let up = loss(spec, &probe, batch)?;
        probe.values[k] = orig - eps;
        let down = loss(spec, &probe, batch)?;
        probe.values[k] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(ParamVector::new(out))
}

/// Largest coordinate-wise relative difference, with magnitudes below
/// `1e-6` treated as `1e-6`.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
