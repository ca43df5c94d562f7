//! Experiment orchestration: data preparation, agent construction, the round
//! loop, and the on-disk outputs of a run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    apply_data_noise, dirichlet_partition, flip_labels, gen_blobs, iid_partition, load_mnist_idx,
    make_validation, random_split, AttackKind, Dataset, PartitionPlan,
};
use crate::diagnostics::{ConvergenceDiagnostics, DiagnosticsRow, GammaBound, IdentityTracker, MeanSnapshot, TheoremConstants};
use crate::engine::{
    compute_metrics, mean_model, mean_momentum, run_round, AgentData, AgentState, Algorithm, EngineConfig,
    MetricsRecord, RoundContext, RoundTrace, Schedule,
};
use crate::error::{Result, RossError};
use crate::model::{init_params, ModelSpec};
use crate::rng::{Purpose, Streams};
use crate::shapley::{shapley_dump_rows, SHAPLEY_DUMP_HEADER};
use crate::topology::{build_topology, metropolis_weights, MixingMatrix};

pub const METRICS_HEADER: &str =
    "run_id,algo,round,avg_train_loss,grad_norm_sq,consensus_dist,test_acc,comm_bytes,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const SHAPLEY_FILE: &str = "shapley.csv";
pub const THEORY_FILE: &str = "theory.json";
pub const TOPOLOGY_FILE: &str = "topology.txt";
pub const TOPOLOGY_EDGES_FILE: &str = "topology_edges.txt";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Builds the training, validation and test sets for a configuration.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let (train, held_out) = match d.source {
        DataSource::Blobs => {
            let all = gen_blobs(cfg.seed, d.train_samples + d.test_samples, d.input_dim, d.num_classes, d.spread)?;
            let mut rng = Streams::new(cfg.seed).global(Purpose::TrainTestSplit);
            random_split(&all, d.test_samples, &mut rng)
        }
        DataSource::Mnist => {
            let dir = d
                .mnist_dir
                .as_ref()
                .ok_or_else(|| RossError::config("key 'data.mnist_dir': required when data.source = mnist"))?;
            let train = load_mnist_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS), Some(d.train_samples))?;
            let test = load_mnist_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS), Some(d.test_samples))?;
            (train, test)
        }
    };
    if train.len() < cfg.topology.n {
        return Err(RossError::config(format!(
            "only {} training samples for {} agents",
            train.len(),
            cfg.topology.n
        )));
    }
    let (validation, test) = make_validation(&held_out, d.validation_fraction, cfg.seed)?;
    Ok(PreparedData { train, validation, test })
}

/// Shard plan: Dirichlet when `data.partition_mu` is set, IID otherwise.
pub fn partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<PartitionPlan> {
    match cfg.data.partition_mu {
        Some(mu) => dirichlet_partition(train, cfg.topology.n, mu, cfg.seed),
        None => iid_partition(train.len(), cfg.topology.n, cfg.seed),
    }
}

/// Agents with identical initial models, zero momentum, and their local
/// (possibly attacked) data.
pub fn build_agents(cfg: &ExperimentConfig, spec: &ModelSpec, train: &Dataset) -> Result<Vec<AgentState>> {
    let plan = partition(cfg, train)?;
    let malicious = cfg.attack.malicious_set(cfg.topology.n, cfg.seed);
    let streams = Streams::new(cfg.seed);
    let x0 = init_params(spec, cfg.seed);
    Ok(plan
        .shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            let clean = train.subset(&shard).samples;
            let local = match (malicious[i], cfg.attack.kind) {
                (true, AttackKind::DataNoise) => {
                    let mut rng = streams.stream(Purpose::DataNoise, i as u64, 0, 0);
                    apply_data_noise(&clean, cfg.attack.noise_sigma, &mut rng)
                }
                (true, AttackKind::LabelFlip) => flip_labels(&clean, train.num_classes),
                _ => clean,
            };
            let data = AgentData { shard, local, malicious: malicious[i] };
            AgentState::new(i, x0.clone(), Arc::new(data))
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write outputs under `cfg.out_dir`.
    pub write_files: bool,
    /// Keep every round trace in memory.
    pub keep_traces: bool,
    /// Keep per-agent gradients and candidates inside the traces.
    pub full_traces: bool,
    pub schedule: Schedule,
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub metrics: Vec<MetricsRecord>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub traces: Vec<RoundTrace>,
    pub final_states: Vec<AgentState>,
    pub mixing: MixingMatrix,
    pub theory: TheoryReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub inputs: Option<ConvergenceDiagnostics>,
    pub gamma_bound: Option<GammaBound>,
    pub gamma_admitted: Option<bool>,
    pub constants: Option<TheoremConstants>,
    pub note: Option<String>,
}

/// Learning-rate condition and constants for the configured run; parameters
/// outside the theory's range are reported in `note` instead of failing.
pub fn theory_report(cfg: &ExperimentConfig, w: &MixingMatrix) -> TheoryReport {
    let diag = ConvergenceDiagnostics {
        smoothness: cfg.theory.smoothness,
        sigma: cfg.theory.sigma,
        heterogeneity: cfg.theory.heterogeneity,
        alpha: cfg.train.momentum,
        gamma: cfg.train.lr,
        rho: w.rho,
        omega_min: w.omega_min,
        n_agents: cfg.topology.n,
    };
    match (diag.gamma_upper_bound(), diag.constants()) {
        (Ok(bound), Ok(constants)) => TheoryReport {
            inputs: Some(diag),
            gamma_admitted: Some(bound.admits(diag.gamma)),
            gamma_bound: Some(bound),
            constants: Some(constants),
            note: None,
        },
        (Err(e), _) | (_, Err(e)) => TheoryReport {
            inputs: Some(diag),
            gamma_bound: None,
            gamma_admitted: None,
            constants: None,
            note: Some(e.to_string()),
        },
    }
}

struct Writers {
    metrics: BufWriter<File>,
    diagnostics: Option<BufWriter<File>>,
    shapley: Option<BufWriter<File>>,
}

impl Writers {
    fn open(cfg: &ExperimentConfig, w: &MixingMatrix, theory: &TheoryReport) -> Result<Self> {
        let dir = &cfg.out_dir;
        cfg.write_effective(dir)?;
        std::fs::write(dir.join(TOPOLOGY_FILE), w.dump_matrix())?;
        std::fs::write(dir.join(TOPOLOGY_EDGES_FILE), w.dump_triples())?;
        let theory_json = serde_json::to_string_pretty(theory)
            .map_err(|e| RossError::invariant(format!("theory report serialization: {e}")))?;
        std::fs::write(dir.join(THEORY_FILE), theory_json + "\n")?;
        let create = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        let mut metrics = create(METRICS_FILE)?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        let diagnostics = if cfg.output.diagnostics { Some(create(DIAGNOSTICS_FILE)?) } else { None };
        let shapley = if cfg.output.shapley_dump && cfg.train.algo == Algorithm::Ross {
            let mut f = create(SHAPLEY_FILE)?;
            writeln!(f, "{SHAPLEY_DUMP_HEADER}")?;
            Some(f)
        } else {
            None
        };
        Ok(Writers { metrics, diagnostics, shapley })
    }

    fn metrics_row(&mut self, cfg: &ExperimentConfig, m: &MetricsRecord) -> Result<()> {
        writeln!(
            self.metrics,
            "{},{},{},{},{},{},{},{},{}",
            cfg.run_id,
            cfg.train.algo,
            m.round,
            m.avg_train_loss,
            m.grad_norm_sq,
            m.consensus_dist,
            m.test_acc,
            m.comm_bytes,
            m.wall_ms
        )?;
        self.metrics.flush()?;
        Ok(())
    }

    fn diagnostics_row(&mut self, row: &DiagnosticsRow) -> Result<()> {
        if let Some(f) = &mut self.diagnostics {
            let line = serde_json::to_string(row)
                .map_err(|e| RossError::invariant(format!("diagnostics serialization: {e}")))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    }

    fn shapley_rows(&mut self, trace: &RoundTrace) -> Result<()> {
        if let Some(f) = &mut self.shapley {
            for a in &trace.agents {
                if let (Some(sv), Some(w)) = (&a.shapley, &a.weights) {
                    f.write_all(shapley_dump_rows(trace.round, a.agent, &a.members, sv, w).as_bytes())?;
                }
            }
            f.flush()?;
        }
        Ok(())
    }
}

fn snapshot(states: &[AgentState]) -> MeanSnapshot {
    MeanSnapshot { ubar: mean_momentum(states), xbar: mean_model(states) }
}

/// Runs `train.rounds` rounds of the configured algorithm.
///
/// Metrics are recorded for round 0 (the initial models) and after every
/// round. When files are written, every row is flushed as soon as it is
/// produced, so a failed run leaves the rows up to the failure on disk.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutputs> {
    cfg.validate()?;
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    let spec = cfg.model_spec(data.train.input_dim, data.train.num_classes);
    spec.validate()?;
    let graph = build_topology(cfg.topology.kind, cfg.topology.n)?;
    let w = metropolis_weights(&graph)?;
    w.validate()?;
    let theory = theory_report(cfg, &w);
    let mut writers = if opts.write_files { Some(Writers::open(cfg, &w, &theory)?) } else { None };

    let engine_cfg = EngineConfig {
        keep_full_trace: opts.full_traces,
        schedule: opts.schedule,
        ..cfg.engine_config()
    };
    let ctx = RoundContext {
        spec: &spec,
        w: &w,
        cfg: &engine_cfg,
        validation: &data.validation.samples,
        streams: Streams::new(cfg.seed),
    };
    let mut states = build_agents(cfg, &spec, &data.train)?;
    let mut tracker = cfg.output.diagnostics.then(|| {
        IdentityTracker::new(
            snapshot(&states),
            states.len(),
            cfg.train.lr,
            cfg.train.momentum,
            cfg.train.algo != Algorithm::Dpsgd,
        )
    });

    let elapsed_ms = |start: &Instant| start.elapsed().as_millis() as u64;
    let mut metrics = Vec::with_capacity(cfg.train.rounds + 1);
    let mut diagnostics = Vec::new();
    let mut traces = Vec::new();
    let mut comm_bytes = 0u64;

    let m0 = MetricsRecord { wall_ms: elapsed_ms(&start), ..compute_metrics(&states, &spec, &data.train, &data.test)? };
    if let Some(wr) = &mut writers {
        wr.metrics_row(cfg, &m0)?;
    }
    metrics.push(m0);

    for t in 1..=cfg.train.rounds {
        let (next, trace) = run_round(cfg.train.algo, &states, &ctx, t)?;
        states = next;
        comm_bytes += trace.comm.bytes();
        let m = MetricsRecord {
            round: t,
            comm_bytes,
            wall_ms: elapsed_ms(&start),
            ..compute_metrics(&states, &spec, &data.train, &data.test)?
        };
        log::debug!("{} round {t}: loss {:.6} acc {:.4}", cfg.run_id, m.avg_train_loss, m.test_acc);
        if let Some(wr) = &mut writers {
            wr.metrics_row(cfg, &m)?;
            wr.shapley_rows(&trace)?;
        }
        metrics.push(m);
        if let Some(tr) = &mut tracker {
            let row = tr.observe(t, snapshot(&states), &trace.aggregated_sum())?;
            if let Some(wr) = &mut writers {
                wr.diagnostics_row(&row)?;
            }
            diagnostics.push(row);
        }
        if opts.keep_traces {
            traces.push(trace);
        }
    }
    Ok(RunOutputs { metrics, diagnostics, traces, final_states: states, mixing: w, theory })
}

/// Metrics CSV body with the `wall_ms` column removed, for determinism checks.
pub fn metrics_without_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join(METRICS_FILE)
}
