//! Datasets, non-IID partitioning, validation split, and data-level attacks.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};
use crate::model::{ParamVector, Sample};
use crate::rng::{Purpose, StreamRng, Streams};

/// A labelled dataset with a fixed feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, input_dim: usize) -> Result<Self> {
        let ds = Dataset {
            samples,
            num_classes,
            input_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(RossError::precondition(format!(
                    "sample {i} has label {} >= {}",
                    s.label, self.num_classes
                )));
            }
            if s.features.len() != self.input_dim {
                return Err(RossError::precondition(format!(
                    "sample {i} has {} features, expected {}",
                    s.features.len(),
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples at the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            input_dim: self.input_dim,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(self.samples.iter().map(|s| s.label), self.num_classes)
    }

    /// Writes the flat binary cache: a text header line
    /// `ross-data v1 <n> <d> <Y>` followed by, per sample, `d` feature
    /// doubles and the label as a double, all little-endian.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.len() * (self.input_dim + 1) * 8);
        writeln!(
            out,
            "ross-data v1 {} {} {}",
            self.len(),
            self.input_dim,
            self.num_classes
        )?;
        for s in &self.samples {
            for v in &s.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(s.label as f64).to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Dataset> {
        let file = fs::File::open(path)
            .map_err(|e| RossError::data_load(0, format!("{}: {e}", path.display())))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| RossError::data_load(0, e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "ross-data" || fields[1] != "v1" {
            return Err(RossError::data_load(0, "bad cache header"));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| RossError::data_load(0, format!("bad header field '{s}'")))
        };
        let (n, d, y) = (parse(fields[2])?, parse(fields[3])?, parse(fields[4])?);
        let mut offset = header.len() as u64;
        let mut buf = [0u8; 8];
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut features = Vec::with_capacity(d);
            for _ in 0..=d {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| RossError::data_load(offset, "truncated cache file"))?;
                offset += 8;
                features.push(f64::from_le_bytes(buf));
            }
            let label = features.pop().expect("label slot");
            if label < 0.0 || label.fract() != 0.0 || label as usize >= y {
                return Err(RossError::data_load(offset - 8, format!("invalid label {label}")));
            }
            samples.push(Sample {
                features,
                label: label as usize,
            });
        }
        Ok(Dataset {
            samples,
            num_classes: y,
            input_dim: d,
        })
    }
}

fn histogram(labels: impl Iterator<Item = usize>, num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for l in labels {
        h[l] += 1;
    }
    h
}

/// Gaussian class clusters around random unit-norm centers scaled by `spread`.
/// Labels cycle `0, 1, ..., Y-1`, so class counts differ by at most one.
pub fn gen_blobs(
    seed: u64,
    n_samples: usize,
    input_dim: usize,
    num_classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(RossError::config("blobs need at least 2 classes"));
    }
    if n_samples < num_classes {
        return Err(RossError::config("blobs need at least one sample per class"));
    }
    if input_dim == 0 || !(spread >= 0.0) {
        return Err(RossError::config("blobs need input_dim > 0 and spread >= 0"));
    }
    let mut rng = Streams::new(seed).global(Purpose::Blobs);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut c: Vec<f64> = (0..input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for v in &mut c {
                *v *= spread / norm;
            }
            c
        })
        .collect();
    let samples = (0..n_samples)
        .map(|i| {
            let label = i % num_classes;
            let features = centers[label]
                .iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            Sample { features, label }
        })
        .collect();
    Dataset::new(samples, num_classes, input_dim)
}

/// Uniform random split into `(first, second)` with `second` of size `n_second`.
pub fn random_split(ds: &Dataset, n_second: usize, rng: &mut StreamRng) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    let n_second = n_second.min(ds.len());
    let (second, first) = idx.split_at(n_second);
    let mut first = first.to_vec();
    let mut second = second.to_vec();
    first.sort_unstable();
    second.sort_unstable();
    (ds.subset(&first), ds.subset(&second))
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| RossError::data_load(offset as u64, "truncated IDX header"))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| RossError::data_load(0, format!("{}: {e}", p.display())))
    };
    let images = read(images_path)?;
    let labels = read(labels_path)?;

    match read_be_u32(&labels, 0)? {
        IDX_LABELS_MAGIC => {}
        other => {
            return Err(RossError::data_load(
                0,
                format!("wrong magic for labels: 0x{other:08x}"),
            ))
        }
    }
    match read_be_u32(&images, 0)? {
        IDX_IMAGES_MAGIC => {}
        other => {
            return Err(RossError::data_load(
                0,
                format!("wrong magic for images: 0x{other:08x}"),
            ))
        }
    }
    let n_labels = read_be_u32(&labels, 4)? as usize;
    let n_images = read_be_u32(&images, 4)? as usize;
    let rows = read_be_u32(&images, 8)? as usize;
    let cols = read_be_u32(&images, 12)? as usize;
    if n_labels != n_images {
        return Err(RossError::data_load(
            4,
            format!("image count {n_images} differs from label count {n_labels}"),
        ));
    }
    let n = limit.map_or(n_images, |l| l.min(n_images));
    let dim = rows * cols;
    let need_images = 16 + n * dim;
    if images.len() < need_images {
        return Err(RossError::data_load(images.len() as u64, "truncated image data"));
    }
    if labels.len() < 8 + n {
        return Err(RossError::data_load(labels.len() as u64, "truncated label data"));
    }
    let mut samples = Vec::with_capacity(n);
    let mut max_label = 0;
    for i in 0..n {
        let label = labels[8 + i] as usize;
        max_label = max_label.max(label);
        let px = &images[16 + i * dim..16 + (i + 1) * dim];
        samples.push(Sample {
            features: px.iter().map(|&b| b as f64 / 255.0).collect(),
            label,
        });
    }
    if max_label >= 10 {
        return Err(RossError::data_load(8, format!("label {max_label} outside 0..10")));
    }
    Ok(Dataset {
        samples,
        num_classes: 10,
        input_dim: dim,
    })
}

/// Per-agent lists of training indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Shards are non-empty, disjoint, and cover `0..total` exactly.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        for (a, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(RossError::invariant(format!("shard {a} is empty")));
            }
            for &i in shard {
                if i >= total || seen[i] {
                    return Err(RossError::invariant(format!(
                        "index {i} duplicated or out of range in shard {a}"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(RossError::invariant("partition does not cover every index"));
        }
        Ok(())
    }
}

/// Random near-equal split, the IID setting.
pub fn iid_partition(n_samples: usize, n_agents: usize, seed: u64) -> Result<PartitionPlan> {
    if n_agents == 0 || n_samples < n_agents {
        return Err(RossError::config(format!(
            "cannot split {n_samples} samples across {n_agents} agents"
        )));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut Streams::new(seed).global(Purpose::Partition));
    let mut shards = vec![Vec::new(); n_agents];
    for (k, i) in idx.into_iter().enumerate() {
        shards[k % n_agents].push(i);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(PartitionPlan { shards })
}

/// Largest-remainder apportionment of `total` items by non-negative weights.
/// Ties in the fractional part go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let k = weights.len();
    let shares: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / k as f64; k]
    };
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &a in order.iter().take(total.saturating_sub(assigned)) {
        counts[a] += 1;
    }
    counts
}

fn sample_dirichlet(concentration: f64, dim: usize, rng: &mut StreamRng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed: fall back to a uniform vector
        vec![1.0 / dim as f64; dim]
    }
}

/// Long-tailed label skew: each agent draws label proportions from
/// `Dir(mu * ones(Y))` and every class is apportioned across agents
/// proportionally to those proportions.
pub fn dirichlet_partition(ds: &Dataset, n_agents: usize, mu: f64, seed: u64) -> Result<PartitionPlan> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(RossError::config(format!("dirichlet mu must be positive, got {mu}")));
    }
    if n_agents < 2 {
        return Err(RossError::config("dirichlet partition needs at least 2 agents"));
    }
    if ds.len() < n_agents {
        return Err(RossError::config(format!(
            "dataset of {} samples is smaller than {n_agents} agents",
            ds.len()
        )));
    }
    let y = ds.num_classes;
    let mut rng = Streams::new(seed).global(Purpose::Partition);
    let proportions: Vec<Vec<f64>> = (0..n_agents)
        .map(|_| sample_dirichlet(mu, y, &mut rng))
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); y];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut shards = vec![Vec::new(); n_agents];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let weights: Vec<f64> = proportions.iter().map(|p| p[c]).collect();
        let counts = largest_remainder(members.len(), &weights);
        let mut start = 0;
        for (a, &k) in counts.iter().enumerate() {
            shards[a].extend_from_slice(&members[start..start + k]);
            start += k;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    // An agent may receive nothing under extreme skew: take one sample
    // from the currently largest shard (lowest index on ties).
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let donor = (0..n_agents)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one shard");
        let moved = shards[donor].pop().expect("donor is non-empty");
        shards[empty].push(moved);
    }
    let plan = PartitionPlan { shards };
    plan.validate(ds.len())?;
    Ok(plan)
}

/// Uniform split of a test set into `(validation, remaining_test)`.
pub fn make_validation(test: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(RossError::config(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n_val = (fraction * test.len() as f64).round() as usize;
    let mut rng = Streams::new(seed).global(Purpose::Validation);
    let (remaining, validation) = random_split(test, n_val, &mut rng);
    Ok((validation, remaining))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    DataNoise,
    LabelFlip,
    GradPoison,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::None,
        AttackKind::DataNoise,
        AttackKind::LabelFlip,
        AttackKind::GradPoison,
    ];
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::None => "none",
            AttackKind::DataNoise => "data_noise",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::GradPoison => "grad_poison",
        })
    }
}

impl FromStr for AttackKind {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "data_noise" => Ok(AttackKind::DataNoise),
            "label_flip" => Ok(AttackKind::LabelFlip),
            "grad_poison" => Ok(AttackKind::GradPoison),
            other => Err(RossError::config(format!(
                "unknown attack '{other}' (allowed: none, data_noise, label_flip, grad_poison)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub malicious_fraction: f64,
    pub noise_sigma: f64,
    pub beta_range: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            malicious_fraction: 0.3,
            noise_sigma: 1.0,
            beta_range: (-0.5, 0.5),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.malicious_fraction) {
            return Err(RossError::config("attack.fraction must be in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(RossError::config("attack.sigma must be non-negative"));
        }
        if !(self.beta_range.0 <= self.beta_range.1) {
            return Err(RossError::config("attack.beta_lo must not exceed attack.beta_hi"));
        }
        Ok(())
    }

    /// `is_malicious[i]` for every agent: the first `floor(fraction * N)` of a
    /// seed-derived permutation. With `kind = none` nobody is malicious.
    pub fn malicious_set(&self, n_agents: usize, seed: u64) -> Vec<bool> {
        let mut flags = vec![false; n_agents];
        if self.kind == AttackKind::None {
            return flags;
        }
        let count = (self.malicious_fraction * n_agents as f64).floor() as usize;
        let mut perm: Vec<usize> = (0..n_agents).collect();
        perm.shuffle(&mut Streams::new(seed).global(Purpose::Malicious));
        for &a in perm.iter().take(count) {
            flags[a] = true;
        }
        flags
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every feature. Labels are untouched.
pub fn apply_data_noise(samples: &[Sample], sigma: f64, rng: &mut StreamRng) -> Vec<Sample> {
    if sigma == 0.0 {
        return samples.to_vec();
    }
    samples
        .iter()
        .map(|s| Sample {
            features: s
                .features
                .iter()
                .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            label: s.label,
        })
        .collect()
}

/// Cyclic label shift `y -> (y + 1) mod Y`.
pub fn flip_labels(samples: &[Sample], num_classes: usize) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            features: s.features.clone(),
            label: (s.label + 1) % num_classes,
        })
        .collect()
}

/// `(1 + beta) * grad` with `beta ~ U[lo, hi]`, one draw per call.
pub fn poison_gradient(grad: &ParamVector, beta_range: (f64, f64), rng: &mut StreamRng) -> ParamVector {
    let (lo, hi) = beta_range;
    let beta = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    grad.scaled(1.0 + beta)
}
