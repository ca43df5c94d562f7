//! Command-line front end: `run`, `sweep`, `check` and `shapley-bench`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{gen_blobs, AttackKind};
use crate::engine::Algorithm;
use crate::error::{Result, RossError};
use crate::model::{finite_diff_grad, init_params, loss_and_grad, max_relative_error, ModelKind, ModelSpec};
use crate::rng::{Purpose, StreamRng, Streams};
use crate::runner::{metrics_path, run_experiment, RunOptions};
use crate::shapley::{exact_shapley, mc_shapley, CharacteristicFn, TabularGame, EXACT_MAX_PLAYERS};
use crate::topology::{build_topology, metropolis_weights, verify_power_decay, TopologyKind};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "run_id,algo,topology,n,attack,partition_mu,seed,rep,status,metrics_path";

#[derive(Debug, Parser)]
#[command(name = "ross", version, about = "Robust decentralized SGD simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write metrics and diagnostics under out_dir.
    Run { config: PathBuf },
    /// Run the Cartesian product of the given axes, one output directory per cell.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        topo: Vec<String>,
        /// Attack kinds; `long_tail` means no attack on a Dirichlet partition.
        #[arg(long, value_delimiter = ',')]
        attack: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        algo: Vec<String>,
        /// Repetitions per cell; repetition k uses seed + k.
        #[arg(long, default_value_t = 1)]
        reps: u64,
    },
    /// Run the invariant battery for a configuration.
    Check { config: PathBuf },
    /// Exact-vs-Monte-Carlo error and coalition evaluations per permutation count.
    ShapleyBench {
        #[arg(long)]
        players: usize,
        #[arg(long = "r", value_delimiter = ',', required = true)]
        rounds: Vec<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run { config } => cmd_run(&ExperimentConfig::load(&config)?).map(|_| 0),
        Command::Sweep { config, n, topo, attack, algo, reps } => {
            let axes = SweepAxes::parse(&n, &topo, &attack, &algo, reps)?;
            cmd_sweep(&ExperimentConfig::load(&config)?, &axes)
        }
        Command::Check { config } => {
            let report = cmd_check(&ExperimentConfig::load(&config)?)?;
            print!("{}", report.table());
            Ok(if report.all_passed() { 0 } else { 4 })
        }
        Command::ShapleyBench { players, rounds, seed } => {
            print!("{}", cmd_shapley_bench(players, &rounds, seed)?);
            Ok(0)
        }
    }
}

/// Runs one experiment with file output.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let opts = RunOptions { write_files: true, ..RunOptions::default() };
    let out = run_experiment(cfg, &opts)?;
    let last = out.metrics.last().expect("round 0 is always recorded");
    log::info!(
        "{}: {} rounds, final loss {:.6}, test accuracy {:.4}",
        cfg.run_id,
        cfg.train.rounds,
        last.avg_train_loss,
        last.test_acc
    );
    Ok(metrics_path(&cfg.out_dir))
}

/// Attack axis value: a real attack, or the long-tail (Dirichlet) setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackSetting {
    Attack(AttackKind),
    LongTail,
}

impl AttackSetting {
    fn parse(s: &str) -> Result<Self> {
        if s == "long_tail" {
            Ok(AttackSetting::LongTail)
        } else {
            s.parse().map(AttackSetting::Attack).map_err(|e| match e {
                RossError::Config(m) => RossError::config(format!("--attack: {m} or long_tail")),
                other => other,
            })
        }
    }
}

pub const LONG_TAIL_MU: f64 = 0.25;

#[derive(Debug, Clone, Default)]
pub struct SweepAxes {
    pub n: Vec<usize>,
    pub topology: Vec<TopologyKind>,
    pub attack: Vec<AttackSetting>,
    pub algo: Vec<Algorithm>,
    pub reps: u64,
}

impl SweepAxes {
    pub fn parse(n: &[usize], topo: &[String], attack: &[String], algo: &[String], reps: u64) -> Result<Self> {
        let topology = topo
            .iter()
            .map(|s| s.parse().map_err(|e: RossError| RossError::config(format!("--topo: {e}"))))
            .collect::<Result<_>>()?;
        let attack = attack.iter().map(|s| AttackSetting::parse(s)).collect::<Result<_>>()?;
        let algo = algo
            .iter()
            .map(|s| s.parse().map_err(|e: RossError| RossError::config(format!("--algo: {e}"))))
            .collect::<Result<_>>()?;
        if reps == 0 {
            return Err(RossError::config("--reps must be at least 1"));
        }
        Ok(SweepAxes { n: n.to_vec(), topology, attack, algo, reps })
    }

    /// One configuration per cell; an empty axis keeps the base value.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<SweepCell>> {
        fn axis<T: Clone>(values: &[T], default: T) -> Vec<T> {
            if values.is_empty() {
                vec![default]
            } else {
                values.to_vec()
            }
        }
        let base_attack = match (base.attack.kind, base.data.partition_mu) {
            (AttackKind::None, Some(_)) => AttackSetting::LongTail,
            (kind, _) => AttackSetting::Attack(kind),
        };
        let mut cells = Vec::new();
        for algo in axis(&self.algo, base.train.algo) {
            for topology in axis(&self.topology, base.topology.kind) {
                for n in axis(&self.n, base.topology.n) {
                    for attack in axis(&self.attack, base_attack) {
                        for rep in 0..self.reps.max(1) {
                            let mut cfg = base.clone();
                            cfg.train.algo = algo;
                            cfg.topology.kind = topology;
                            cfg.topology.n = n;
                            match attack {
                                AttackSetting::LongTail => {
                                    cfg.attack.kind = AttackKind::None;
                                    cfg.data.partition_mu = Some(base.data.partition_mu.unwrap_or(LONG_TAIL_MU));
                                }
                                AttackSetting::Attack(kind) => cfg.attack.kind = kind,
                            }
                            cfg.seed = base.seed.wrapping_add(rep);
                            cfg.run_id = format!(
                                "{}-{}-{}-n{}-{}-s{}",
                                base.run_id,
                                algo,
                                topology,
                                n,
                                cfg.attack_label(),
                                cfg.seed
                            );
                            cfg.out_dir = base.out_dir.join(&cfg.run_id);
                            cfg.validate()?;
                            cells.push(SweepCell { cfg, rep });
                        }
                    }
                }
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = cells.iter().find(|c| !seen.insert(c.cfg.run_id.clone())) {
            return Err(RossError::config(format!("sweep produces duplicate run id {}", dup.cfg.run_id)));
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub cfg: ExperimentConfig,
    pub rep: u64,
}

fn manifest_row(cell: &SweepCell, status: &str) -> String {
    let c = &cell.cfg;
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        c.run_id,
        c.train.algo,
        c.topology.kind,
        c.topology.n,
        c.attack_label(),
        c.data.partition_mu.map_or_else(|| "none".to_string(), |m| m.to_string()),
        c.seed,
        cell.rep,
        status,
        Path::new(&c.run_id).join(crate::runner::METRICS_FILE).display()
    )
}

/// Runs every cell (in parallel) and writes `manifest.csv` once all are done.
/// Returns the exit code of the first failed cell, or 0.
pub fn cmd_sweep(base: &ExperimentConfig, axes: &SweepAxes) -> Result<i32> {
    let cells = axes.cells(base)?;
    std::fs::create_dir_all(&base.out_dir)?;
    let results: Vec<Result<PathBuf>> = cells.par_iter().map(|c| cmd_run(&c.cfg)).collect();
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut code = 0;
    for (cell, res) in cells.iter().zip(&results) {
        let status = match res {
            Ok(_) => "ok".to_string(),
            Err(e) => {
                eprintln!("error: {}: {e}", cell.cfg.run_id);
                if code == 0 {
                    code = e.exit_code();
                }
                format!("failed({})", e.exit_code())
            }
        };
        manifest.push_str(&manifest_row(cell, &status));
        manifest.push('\n');
    }
    std::fs::write(base.out_dir.join(MANIFEST_FILE), manifest)?;
    Ok(code)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    fn record(&mut self, name: &str, outcome: Result<String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        self.lines.push(CheckLine { name: name.to_string(), passed, detail });
    }

    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn table(&self) -> String {
        let width = self.lines.iter().map(|l| l.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for l in &self.lines {
            let tag = if l.passed { "PASS" } else { "FAIL" };
            writeln!(s, "[{tag}] {:width$}  {}", l.name, l.detail).expect("write to string");
        }
        s
    }
}

fn check_mixing(cfg: &ExperimentConfig) -> Result<String> {
    let w = metropolis_weights(&build_topology(cfg.topology.kind, cfg.topology.n)?)?;
    w.validate()?;
    let decay = verify_power_decay(&w, 10)?;
    Ok(format!(
        "{} N={}: rho={:.6}, omega_min={:.6}, power-decay slack {:.3e}",
        cfg.topology.kind, cfg.topology.n, w.rho, w.omega_min, decay.min_slack
    ))
}

fn random_table(players: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut table: Vec<f64> = (0..1usize << players).map(|_| rng.random::<f64>()).collect();
    table[0] = 0.0;
    table
}

fn check_shapley_axioms(seed: u64) -> Result<String> {
    let mut rng = Streams::new(seed).global(Purpose::Bench);
    let mut worst = 0.0f64;
    for game_idx in 0..20 {
        let n = rng.random_range(2..=8usize);
        // the last player is a dummy: adding it never changes the value
        let mut table = random_table(n - 1, &mut rng);
        table.extend_from_slice(&table.clone());
        let mut game = TabularGame::new(n, table.clone())?;
        let phi = exact_shapley(&mut game)?;
        let efficiency = (phi.iter().sum::<f64>() - (table[table.len() - 1] - table[0])).abs();
        let dummy = phi[n - 1].abs();
        worst = worst.max(efficiency);
        if efficiency > 1e-12 || dummy != 0.0 {
            return Err(RossError::invariant(format!(
                "game {game_idx}: efficiency residual {efficiency:e}, dummy value {dummy:e}"
            )));
        }
    }
    Ok(format!("20 games, max efficiency residual {worst:.3e}"))
}

fn check_gradients(cfg: &ExperimentConfig) -> Result<String> {
    let d = cfg.data.input_dim.min(8);
    let spec = match cfg.model.kind {
        ModelKind::Logistic => ModelSpec::logistic(d, cfg.data.num_classes),
        ModelKind::Mlp => ModelSpec::mlp(d, cfg.model.hidden.iter().map(|&h| h.min(8)).collect(), cfg.data.num_classes),
    };
    let data = gen_blobs(cfg.seed, 24, d, cfg.data.num_classes, 1.0)?;
    let mut worst = 0.0f64;
    for draw in 0..3u64 {
        let params = init_params(&spec, cfg.seed.wrapping_add(draw));
        let (_, g) = loss_and_grad(&spec, &params, &data.samples)?;
        let fd = finite_diff_grad(&spec, &params, &data.samples, 1e-5)?;
        worst = worst.max(max_relative_error(&g, &fd));
    }
    if worst > 1e-4 {
        return Err(RossError::invariant(format!("max relative gradient error {worst:e}")));
    }
    Ok(format!("{} model, 3 draws, max relative error {worst:.3e}", spec.kind))
}

fn check_smoke_run(cfg: &ExperimentConfig) -> Result<String> {
    let mut smoke = cfg.clone();
    smoke.train.rounds = smoke.train.rounds.min(10);
    smoke.output.diagnostics = true;
    let out = run_experiment(&smoke, &RunOptions::default())?;
    let sbar = out.diagnostics.iter().map(|r| r.sbar_residual).fold(0.0, f64::max);
    let mean = out
        .diagnostics
        .iter()
        .map(|r| r.mean_resid_x.max(r.mean_resid_u.unwrap_or(0.0)))
        .fold(0.0, f64::max);
    Ok(format!(
        "{} rounds of {}: max S-bar residual {sbar:.3e}, max mean residual {mean:.3e}",
        smoke.train.rounds, smoke.train.algo
    ))
}

/// The invariant battery. Every check runs; failures are reported, not raised.
pub fn cmd_check(cfg: &ExperimentConfig) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    report.record("mixing matrix", check_mixing(cfg));
    report.record("shapley axioms", check_shapley_axioms(cfg.seed));
    report.record("gradient check", check_gradients(cfg));
    report.record("round identities", check_smoke_run(cfg));
    Ok(report)
}

/// Counts the distinct coalitions a Shapley estimator touches.
struct CountingGame<'a> {
    inner: &'a mut TabularGame,
    seen: HashSet<u64>,
}

impl CharacteristicFn for CountingGame<'_> {
    fn players(&self) -> usize {
        self.inner.players()
    }

    fn value(&mut self, mask: u64) -> f64 {
        if mask != 0 {
            self.seen.insert(mask);
        }
        self.inner.value(mask)
    }
}

/// Table of Monte-Carlo error against exact values on a random game.
pub fn cmd_shapley_bench(players: usize, rounds: &[usize], seed: u64) -> Result<String> {
    if !(1..=EXACT_MAX_PLAYERS).contains(&players) {
        return Err(RossError::config(format!("--players must be in 1..={EXACT_MAX_PLAYERS}")));
    }
    if rounds.is_empty() || rounds.contains(&0) {
        return Err(RossError::config("--r needs one or more positive permutation counts"));
    }
    let streams = Streams::new(seed);
    let mut game = TabularGame::new(players, random_table(players, &mut streams.global(Purpose::Bench)))?;
    let exact = exact_shapley(&mut game)?;
    let mut out = String::from("players,R,max_abs_err,coalitions_evaluated,exact_coalitions,elapsed_us\n");
    for &r in rounds {
        let mut counting = CountingGame { inner: &mut game, seen: HashSet::new() };
        let mut rng = streams.stream(Purpose::Shapley, 0, 0, r as u64);
        let start = Instant::now();
        let mc = mc_shapley(&mut counting, r, &mut rng)?;
        let elapsed = start.elapsed().as_micros();
        let err = mc.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        writeln!(
            out,
            "{players},{r},{err:.6e},{},{},{elapsed}",
            counting.seen.len(),
            (1usize << players) - 1
        )
        .expect("write to string");
    }
    Ok(out)
}
