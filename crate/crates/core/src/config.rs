//! Flat `key = value` experiment configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Unknown keys,
//! duplicate keys, malformed values and out-of-range values are all rejected
//! with the offending key in the message. Optional keys accept `none`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AttackConfig, AttackKind};
use crate::engine::{Algorithm, EngineConfig};
use crate::error::{Result, RossError};
use crate::model::{ModelKind, ModelSpec};
use crate::shapley::{ShapleyConfig, ShapleyMode, EXACT_MAX_PLAYERS, MAX_PLAYERS};
use crate::topology::TopologyKind;

pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Mnist,
}

impl FromStr for DataSource {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DataSource::Blobs),
            "mnist" => Ok(DataSource::Mnist),
            other => Err(RossError::config(format!(
                "unknown data source '{other}' (allowed: blobs, mnist)"
            ))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Blobs => "blobs",
            DataSource::Mnist => "mnist",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training samples (for MNIST, the number of leading training images used).
    pub train_samples: usize,
    /// Held-out samples, later split into validation and test.
    pub test_samples: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub spread: f64,
    /// Directory holding the four standard MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
    /// Dirichlet concentration; `None` gives an IID partition.
    pub partition_mu: Option<f64>,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algo: Algorithm,
    pub rounds: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub shapley_dump: bool,
    pub diagnostics: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    pub smoothness: f64,
    pub sigma: f64,
    pub heterogeneity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub run_id: String,
    pub out_dir: PathBuf,
    pub topology: TopologyConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub train: TrainConfig,
    pub shapley: ShapleyConfig,
    pub output: OutputConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            run_id: "run".to_string(),
            out_dir: PathBuf::from("out"),
            topology: TopologyConfig { kind: TopologyKind::Full, n: 10 },
            data: DataConfig {
                source: DataSource::Blobs,
                train_samples: 3000,
                test_samples: 800,
                input_dim: 10,
                num_classes: 3,
                spread: 1.0,
                mnist_dir: None,
                partition_mu: None,
                validation_fraction: 0.25,
            },
            model: ModelConfig { kind: ModelKind::Logistic, hidden: vec![64] },
            attack: AttackConfig::default(),
            train: TrainConfig {
                algo: Algorithm::Ross,
                rounds: 150,
                lr: 0.001,
                momentum: 0.5,
                batch: 260,
            },
            shapley: ShapleyConfig::default(),
            output: OutputConfig { shapley_dump: false, diagnostics: true },
            theory: TheoryConfig { smoothness: 1.0, sigma: 0.1, heterogeneity: 0.1 },
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "run_id",
    "out_dir",
    "topology.kind",
    "topology.n",
    "data.source",
    "data.train_samples",
    "data.test_samples",
    "data.input_dim",
    "data.num_classes",
    "data.spread",
    "data.mnist_dir",
    "data.partition_mu",
    "data.validation_fraction",
    "model.kind",
    "model.hidden",
    "attack.kind",
    "attack.fraction",
    "attack.beta_lo",
    "attack.beta_hi",
    "attack.sigma",
    "train.algo",
    "train.rounds",
    "train.lr",
    "train.momentum",
    "train.batch",
    "shapley.mode",
    "shapley.mc_rounds",
    "shapley.exact_max_players",
    "shapley.validation_subsample",
    "output.shapley_dump",
    "output.diagnostics",
    "theory.smoothness",
    "theory.sigma",
    "theory.heterogeneity",
];

fn key_error(key: &str, msg: impl std::fmt::Display) -> RossError {
    RossError::config(format!("key '{key}': {msg}"))
}

/// Raw `key -> value` pairs with line numbers.
#[derive(Debug, Default)]
struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let content = strip_comment(line).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                RossError::config(format!("line {lineno}: expected 'key = value', got '{content}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(RossError::config(format!("line {lineno}: unknown key '{key}'")));
            }
            if let Some((first, _)) = raw.entries.get(key) {
                return Err(RossError::config(format!(
                    "line {lineno}: duplicate key '{key}' (first set on line {first})"
                )));
            }
            raw.entries.insert(key.to_string(), (lineno, value.to_string()));
        }
        Ok(raw)
    }

    fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some((_, v)) => v.parse::<T>().map_err(|e| key_error(key, format!("invalid value '{v}': {e}"))),
        }
    }

    fn get_opt<T>(&self, key: &str, default: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some((_, v)) if v == "none" => Ok(None),
            Some((_, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| key_error(key, format!("invalid value '{v}': {e}"))),
        }
    }

    fn get_enum<T: FromStr<Err = RossError>>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((_, v)) => v.parse::<T>().map_err(|e| match e {
                RossError::Config(msg) => key_error(key, msg),
                other => other,
            }),
        }
    }

    fn get_list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((_, v)) if v.is_empty() || v == "none" => Ok(Vec::new()),
            Some((_, v)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|e| key_error(key, format!("invalid list entry '{}': {e}", p.trim())))
                })
                .collect(),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl ExperimentConfig {
    /// Parses and validates configuration text.
    pub fn parse_str(text: &str) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        let d = ExperimentConfig::default();
        let cfg = ExperimentConfig {
            seed: raw.get("seed", d.seed)?,
            run_id: raw.get("run_id", d.run_id)?,
            out_dir: raw.get("out_dir", d.out_dir)?,
            topology: TopologyConfig {
                kind: raw.get_enum("topology.kind", d.topology.kind)?,
                n: raw.get("topology.n", d.topology.n)?,
            },
            data: DataConfig {
                source: raw.get_enum("data.source", d.data.source)?,
                train_samples: raw.get("data.train_samples", d.data.train_samples)?,
                test_samples: raw.get("data.test_samples", d.data.test_samples)?,
                input_dim: raw.get("data.input_dim", d.data.input_dim)?,
                num_classes: raw.get("data.num_classes", d.data.num_classes)?,
                spread: raw.get("data.spread", d.data.spread)?,
                mnist_dir: raw.get_opt("data.mnist_dir", d.data.mnist_dir)?,
                partition_mu: raw.get_opt("data.partition_mu", d.data.partition_mu)?,
                validation_fraction: raw.get("data.validation_fraction", d.data.validation_fraction)?,
            },
            model: ModelConfig {
                kind: raw.get_enum("model.kind", d.model.kind)?,
                hidden: raw.get_list("model.hidden", d.model.hidden)?,
            },
            attack: AttackConfig {
                kind: raw.get_enum("attack.kind", d.attack.kind)?,
                malicious_fraction: raw.get("attack.fraction", d.attack.malicious_fraction)?,
                noise_sigma: raw.get("attack.sigma", d.attack.noise_sigma)?,
                beta_range: (
                    raw.get("attack.beta_lo", d.attack.beta_range.0)?,
                    raw.get("attack.beta_hi", d.attack.beta_range.1)?,
                ),
            },
            train: TrainConfig {
                algo: raw.get_enum("train.algo", d.train.algo)?,
                rounds: raw.get("train.rounds", d.train.rounds)?,
                lr: raw.get("train.lr", d.train.lr)?,
                momentum: raw.get("train.momentum", d.train.momentum)?,
                batch: raw.get("train.batch", d.train.batch)?,
            },
            shapley: ShapleyConfig {
                mode: raw.get_enum("shapley.mode", d.shapley.mode)?,
                mc_rounds: raw.get_opt("shapley.mc_rounds", d.shapley.mc_rounds)?,
                exact_max_players: raw.get("shapley.exact_max_players", d.shapley.exact_max_players)?,
                validation_subsample: raw
                    .get_opt("shapley.validation_subsample", d.shapley.validation_subsample)?,
            },
            output: OutputConfig {
                shapley_dump: raw.get("output.shapley_dump", d.output.shapley_dump)?,
                diagnostics: raw.get("output.diagnostics", d.output.diagnostics)?,
            },
            theory: TheoryConfig {
                smoothness: raw.get("theory.smoothness", d.theory.smoothness)?,
                sigma: raw.get("theory.sigma", d.theory.sigma)?,
                heterogeneity: raw.get("theory.heterogeneity", d.theory.heterogeneity)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RossError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(key_error(key, msg))
            }
        }
        let n = self.topology.n;
        check(!self.run_id.is_empty() && !self.run_id.contains(['/', '\\', ',']), "run_id",
            "must be non-empty without path separators or commas")?;
        check(n >= self.topology.kind.min_agents(), "topology.n",
            &format!("{} needs at least {} agents", self.topology.kind, self.topology.kind.min_agents()))?;
        let dc = &self.data;
        check(dc.train_samples >= n, "data.train_samples", "need at least one training sample per agent")?;
        check(dc.test_samples >= 2, "data.test_samples", "need at least 2 held-out samples")?;
        check(dc.validation_fraction > 0.0 && dc.validation_fraction < 1.0, "data.validation_fraction", "must be in (0, 1)")?;
        let n_val = (dc.validation_fraction * dc.test_samples as f64).round() as usize;
        check(n_val >= 1 && n_val < dc.test_samples, "data.validation_fraction",
            "must leave at least one validation and one test sample")?;
        if dc.source == DataSource::Blobs {
            check(dc.input_dim >= 1, "data.input_dim", "must be at least 1")?;
            check(dc.num_classes >= 2, "data.num_classes", "must be at least 2")?;
            check(dc.spread >= 0.0 && dc.spread.is_finite(), "data.spread", "must be finite and non-negative")?;
        } else {
            check(dc.mnist_dir.is_some(), "data.mnist_dir", "required when data.source = mnist")?;
        }
        if let Some(mu) = dc.partition_mu {
            check(mu > 0.0 && mu.is_finite(), "data.partition_mu", "must be positive")?;
        }
        if self.model.kind == ModelKind::Mlp {
            check(!self.model.hidden.is_empty() && self.model.hidden.iter().all(|&h| h > 0),
                "model.hidden", "mlp needs one or more positive layer widths")?;
        }
        self.attack.validate().map_err(|e| match e {
            RossError::Config(msg) => RossError::config(format!("attack: {msg}")),
            other => other,
        })?;
        check(self.attack.beta_range.0.is_finite() && self.attack.beta_range.1.is_finite(),
            "attack.beta_lo", "beta bounds must be finite")?;
        let t = &self.train;
        check(t.rounds >= 1, "train.rounds", "must be at least 1")?;
        check(t.lr >= 0.0 && t.lr.is_finite(), "train.lr", "must be finite and non-negative")?;
        check((0.0..1.0).contains(&t.momentum), "train.momentum", "must be in [0, 1)")?;
        check(t.batch >= 1, "train.batch", "must be at least 1")?;
        let s = &self.shapley;
        check(s.mc_rounds.is_none_or(|r| r >= 1), "shapley.mc_rounds", "must be at least 1")?;
        check((1..=EXACT_MAX_PLAYERS).contains(&s.exact_max_players), "shapley.exact_max_players",
            &format!("must be in 1..={EXACT_MAX_PLAYERS}"))?;
        check(s.validation_subsample.is_none_or(|k| k >= 1), "shapley.validation_subsample", "must be at least 1")?;
        if t.algo == Algorithm::Ross {
            let players = self.max_neighborhood();
            check(players <= MAX_PLAYERS, "topology.n",
                &format!("ross supports neighborhoods of at most {MAX_PLAYERS} agents, got {players}"))?;
            check(s.mode != ShapleyMode::Exact || players <= EXACT_MAX_PLAYERS, "shapley.mode",
                &format!("exact mode supports at most {EXACT_MAX_PLAYERS} players, got {players}"))?;
        }
        let th = &self.theory;
        check(th.smoothness > 0.0 && th.smoothness.is_finite(), "theory.smoothness", "must be positive")?;
        check(th.sigma >= 0.0, "theory.sigma", "must be non-negative")?;
        check(th.heterogeneity >= 0.0, "theory.heterogeneity", "must be non-negative")?;
        Ok(())
    }

    /// Largest `|N_i|` for the configured topology.
    pub fn max_neighborhood(&self) -> usize {
        let n = self.topology.n;
        match self.topology.kind {
            TopologyKind::Full => n,
            TopologyKind::Ring => 3.min(n),
            TopologyKind::Bipartite => n.div_ceil(2) + 1,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            lr: self.train.lr,
            momentum: self.train.momentum,
            batch: self.train.batch,
            attack: self.attack,
            shapley: self.shapley,
            ..EngineConfig::default()
        }
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        match self.model.kind {
            ModelKind::Logistic => ModelSpec::logistic(input_dim, num_classes),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, self.model.hidden.clone(), num_classes),
        }
    }

    /// Every key with its effective value, in a form [`parse_str`](Self::parse_str) accepts.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        put("seed", self.seed.to_string());
        put("run_id", self.run_id.clone());
        put("out_dir", self.out_dir.display().to_string());
        put("topology.kind", self.topology.kind.to_string());
        put("topology.n", self.topology.n.to_string());
        let d = &self.data;
        put("data.source", d.source.to_string());
        put("data.train_samples", d.train_samples.to_string());
        put("data.test_samples", d.test_samples.to_string());
        put("data.input_dim", d.input_dim.to_string());
        put("data.num_classes", d.num_classes.to_string());
        put("data.spread", d.spread.to_string());
        put("data.mnist_dir", fmt_opt(&d.mnist_dir.as_ref().map(|p| p.display())));
        put("data.partition_mu", fmt_opt(&d.partition_mu));
        put("data.validation_fraction", d.validation_fraction.to_string());
        put("model.kind", self.model.kind.to_string());
        put(
            "model.hidden",
            self.model.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        put("attack.kind", self.attack.kind.to_string());
        put("attack.fraction", self.attack.malicious_fraction.to_string());
        put("attack.beta_lo", self.attack.beta_range.0.to_string());
        put("attack.beta_hi", self.attack.beta_range.1.to_string());
        put("attack.sigma", self.attack.noise_sigma.to_string());
        put("train.algo", self.train.algo.to_string());
        put("train.rounds", self.train.rounds.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.momentum", self.train.momentum.to_string());
        put("train.batch", self.train.batch.to_string());
        put("shapley.mode", self.shapley.mode.to_string());
        put("shapley.mc_rounds", fmt_opt(&self.shapley.mc_rounds));
        put("shapley.exact_max_players", self.shapley.exact_max_players.to_string());
        put("shapley.validation_subsample", fmt_opt(&self.shapley.validation_subsample));
        put("output.shapley_dump", self.output.shapley_dump.to_string());
        put("output.diagnostics", self.output.diagnostics.to_string());
        put("theory.smoothness", self.theory.smoothness.to_string());
        put("theory.sigma", self.theory.sigma.to_string());
        put("theory.heterogeneity", self.theory.heterogeneity.to_string());
        s
    }

    /// Writes the effective configuration to `out_dir/config.effective`.
    pub fn write_effective(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_config_string())?;
        Ok(path)
    }

    pub fn attack_label(&self) -> String {
        match (self.attack.kind, self.data.partition_mu) {
            (AttackKind::None, Some(_)) => "long_tail".to_string(),
            (kind, _) => kind.to_string(),
        }
    }
}
