//! Acceptance suite: one `[PASS]` / `[FAIL]` / `[SKIP]` line per criterion.
//!
//! Tolerances and runtime budgets are fixed in the table at the bottom.
//! Reference values are computed here independently of the library where a
//! closed form or brute-force oracle exists.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ross::config::ExperimentConfig;
use ross::data::AttackKind;
use ross::diagnostics::ConvergenceDiagnostics;
use ross::engine::{mean_model, mean_momentum, run_round, Algorithm, RoundContext};
use ross::model::{finite_diff_grad, loss_and_grad, ModelSpec, ParamVector, Sample};
use ross::rng::Streams;
use ross::runner::{build_agents, metrics_without_wall_time, prepare_data, run_experiment, RunOptions};
use ross::shapley::{exact_shapley, mc_shapley, CoalitionGame, TabularGame};
use ross::topology::{build_topology, metropolis_weights, verify_power_decay, TopologyKind};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- shapley

/// Average marginal contribution over every ordering of the players.
fn permutation_oracle(n: usize, table: &[f64]) -> Vec<f64> {
    fn rec(prefix: &mut Vec<usize>, used: u64, n: usize, table: &[f64], acc: &mut [f64], count: &mut u64) {
        if prefix.len() == n {
            let mut mask = 0u64;
            for &p in prefix.iter() {
                acc[p] += table[(mask | 1 << p) as usize] - table[mask as usize];
                mask |= 1 << p;
            }
            *count += 1;
            return;
        }
        for p in 0..n {
            if used & (1 << p) == 0 {
                prefix.push(p);
                rec(prefix, used | 1 << p, n, table, acc, count);
                prefix.pop();
            }
        }
    }
    let mut acc = vec![0.0; n];
    let mut count = 0;
    rec(&mut Vec::new(), 0, n, table, &mut acc, &mut count);
    acc.iter().map(|a| a / count as f64).collect()
}

fn random_table(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t: Vec<f64> = (0..1usize << n).map(|_| rng.random::<f64>()).collect();
    t[0] = 0.0;
    t
}

fn phi(n: usize, table: Vec<f64>) -> Result<Vec<f64>, String> {
    exact_shapley(&mut TabularGame::new(n, table).map_err(e2s)?).map_err(e2s)
}

fn shapley_axioms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut eff, mut sym, mut lin, mut oracle) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for g in 0..100 {
        let n = 2 + g % 7;
        let dummy = rng.random_range(0..n);
        let (a, b) = loop {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b && a != dummy && b != dummy || n == 2 {
                break (a, b);
            }
        };
        // base game with a dummy player and, when n > 2, two symmetric players
        let raw = random_table(n, &mut rng);
        let canon = |mut m: usize| {
            m &= !(1 << dummy);
            if n > 2 {
                let both = (m >> a & 1) + (m >> b & 1);
                m &= !(1 << a | 1 << b);
                if both >= 1 {
                    m |= 1 << a.min(b);
                }
                if both == 2 {
                    m |= 1 << a.max(b);
                }
            }
            m
        };
        let mut table: Vec<f64> = (0..1usize << n).map(|m| raw[canon(m)]).collect();
        table[0] = 0.0;
        let p = phi(n, table.clone())?;
        eff = eff.max((p.iter().sum::<f64>() - (table[(1 << n) - 1] - table[0])).abs());
        ensure(p[dummy] == 0.0, || format!("game {g}: dummy player {dummy} got {:e}", p[dummy]))?;
        if n > 2 {
            sym = sym.max((p[a] - p[b]).abs());
        }
        let other = random_table(n, &mut rng);
        let c = rng.random_range(-2.0..2.0);
        let combo: Vec<f64> = table.iter().zip(&other).map(|(x, y)| c * x + y).collect();
        let (pc, po) = (phi(n, combo)?, phi(n, other)?);
        for k in 0..n {
            lin = lin.max((pc[k] - (c * p[k] + po[k])).abs());
        }
        if n <= 6 {
            let o = permutation_oracle(n, &table);
            oracle = oracle.max(p.iter().zip(&o).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    ensure(eff <= 1e-12 && sym <= 1e-12 && lin <= 1e-12 && oracle <= 1e-12, || {
        format!("efficiency {eff:e}, symmetry {sym:e}, linearity {lin:e}, permutation oracle {oracle:e}")
    })?;
    Ok(format!(
        "100 games: efficiency {eff:.1e}, symmetry {sym:.1e}, linearity {lin:.1e}, dummy exact, permutation oracle {oracle:.1e}"
    ))
}

fn mc_vs_exact() -> Outcome {
    let cfg = ExperimentConfig::parse_str(
        "seed = 7\ntopology.kind = ring\ntopology.n = 6\ntrain.rounds = 10\ntrain.batch = 64\n\
         data.partition_mu = 0.25\noutput.diagnostics = false\n",
    )
    .map_err(e2s)?;
    let data = prepare_data(&cfg).map_err(e2s)?;
    let spec = cfg.model_spec(data.train.input_dim, data.train.num_classes);
    let out = run_experiment(&cfg, &RunOptions::default()).map_err(e2s)?;
    let x0 = &out.final_states[0].x;
    // Five players: agent 0's model stepped along the gradients of agents
    // 0..5 on their own first 64 local samples.
    let step = 3.0;
    let candidates: Vec<ParamVector> = out.final_states[..5]
        .iter()
        .map(|a| {
            let batch = &a.data.local[..64.min(a.data.local.len())];
            let (_, g) = loss_and_grad(&spec, x0, batch).map_err(e2s)?;
            Ok(x0.minus_scaled(step, &g))
        })
        .collect::<Result<_, String>>()?;
    let mut game = CoalitionGame::new((0..5).collect(), candidates, &spec, &data.validation.samples).map_err(e2s)?;
    let exact = exact_shapley(&mut game).map_err(e2s)?;
    let spread = exact.iter().cloned().fold(f64::MIN, f64::max) - exact.iter().cloned().fold(f64::MAX, f64::min);
    ensure(spread > 0.0, || "degenerate game: all players have equal Shapley values".into())?;
    let mut rng = Streams::new(11).stream(ross::rng::Purpose::Shapley, 0, 0, 0);
    let mc = mc_shapley(&mut game, 20_000, &mut rng).map_err(e2s)?;
    let err = mc.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err <= 0.01, || format!("max |mc - exact| = {err:.4e} > 0.01"))?;
    Ok(format!("5 players, R=20000: max |dphi| = {err:.2e} (phi spread {spread:.3e})"))
}

// ---------------------------------------------------------------- gradients

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: HashMap<&str, f64> = HashMap::new();
    for kind in ["logistic", "mlp"] {
        for _ in 0..50 {
            let d = rng.random_range(1..=8);
            let y = rng.random_range(2..=5);
            let spec = if kind == "logistic" {
                ModelSpec::logistic(d, y)
            } else {
                let layers = rng.random_range(1..=2);
                ModelSpec::mlp(d, (0..layers).map(|_| rng.random_range(1..=8)).collect(), y)
            };
            let params = ParamVector::new((0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let batch: Vec<Sample> = (0..rng.random_range(1..=16))
                .map(|_| Sample {
                    features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    label: rng.random_range(0..y),
                })
                .collect();
            let (_, g) = loss_and_grad(&spec, &params, &batch).map_err(e2s)?;
            let fd = finite_diff_grad(&spec, &params, &batch, 1e-5).map_err(e2s)?;
            // relative error with an absolute floor for near-zero coordinates
            let err = g
                .values
                .iter()
                .zip(&fd.values)
                .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
                .fold(0.0, f64::max);
            let w = worst.entry(kind).or_insert(0.0);
            *w = w.max(err);
        }
    }
    let (l, m) = (worst["logistic"], worst["mlp"]);
    ensure(l <= 1e-4 && m <= 1e-4, || format!("max relative error logistic {l:e}, mlp {m:e}"))?;
    Ok(format!("50 draws per kind: max relative error logistic {l:.1e}, mlp {m:.1e}"))
}

// ---------------------------------------------------------------- mixing

/// Nontrivial spectrum of the Metropolis matrix, in closed form.
fn closed_form_eigs(kind: TopologyKind, n: usize) -> Vec<f64> {
    match kind {
        TopologyKind::Full => vec![0.0; n - 1],
        TopologyKind::Ring => (1..n)
            .map(|k| 1.0 / 3.0 + 2.0 / 3.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
            .collect(),
        TopologyKind::Bipartite => {
            let (a, b) = (n.div_ceil(2), n / 2);
            let c = 1.0 / (1.0 + a.max(b) as f64);
            let mut e = vec![1.0 - (a + b) as f64 * c];
            e.extend(std::iter::repeat_n(1.0 - b as f64 * c, a - 1));
            e.extend(std::iter::repeat_n(1.0 - a as f64 * c, b.saturating_sub(1)));
            e
        }
    }
}

fn mixing_suite() -> Outcome {
    let mut worst_row = 0.0f64;
    let mut worst_rho = 0.0f64;
    let mut worst_slack = f64::INFINITY;
    for n in [4, 10, 20] {
        for kind in TopologyKind::ALL {
            let m = metropolis_weights(&build_topology(kind, n).map_err(e2s)?).map_err(e2s)?;
            for i in 0..n {
                let row: f64 = (0..n).map(|j| m.weight(i, j)).sum();
                worst_row = worst_row.max((row - 1.0).abs());
                for j in 0..n {
                    ensure(m.weight(i, j) == m.weight(j, i), || format!("{kind} N={n}: W[{i}][{j}] != W[{j}][{i}]"))?;
                }
            }
            ensure(m.omega_min > 0.0, || format!("{kind} N={n}: omega_min = {}", m.omega_min))?;
            let rho = closed_form_eigs(kind, n).iter().map(|e| e * e).fold(0.0, f64::max);
            worst_rho = worst_rho.max((m.rho - rho).abs());
            let report = verify_power_decay(&m, 10).map_err(e2s)?;
            for r in &report.rows {
                ensure(r.norm <= rho.sqrt().powi(r.t as i32) + 1e-9, || {
                    format!("{kind} N={n} t={}: norm {} exceeds closed-form bound", r.t, r.norm)
                })?;
            }
            worst_slack = worst_slack.min(report.min_slack);
        }
    }
    let ring4 = metropolis_weights(&build_topology(TopologyKind::Ring, 4).map_err(e2s)?).map_err(e2s)?;
    let ring4_err = (ring4.rho - 1.0 / 9.0).abs();
    ensure(worst_row <= 1e-12, || format!("row sum error {worst_row:e}"))?;
    ensure(worst_rho <= 1e-12, || format!("rho differs from closed form by {worst_rho:e}"))?;
    ensure(ring4_err <= 1e-12, || format!("ring-4 rho off by {ring4_err:e}"))?;
    Ok(format!(
        "9 graphs: row sums {worst_row:.1e}, rho vs closed form {worst_rho:.1e}, ring-4 rho error {ring4_err:.1e}, power-decay min slack {worst_slack:.1e}"
    ))
}

// ---------------------------------------------------------------- theory

fn theory_identities() -> Outcome {
    let cfg = ExperimentConfig::parse_str(
        "seed = 3\ntopology.kind = ring\ntopology.n = 8\ndata.partition_mu = 0.25\ntrain.rounds = 50\ntrain.batch = 64\n",
    )
    .map_err(e2s)?;
    let data = prepare_data(&cfg).map_err(e2s)?;
    let spec = cfg.model_spec(data.train.input_dim, data.train.num_classes);
    let w = metropolis_weights(&build_topology(cfg.topology.kind, cfg.topology.n).map_err(e2s)?).map_err(e2s)?;
    let engine = cfg.engine_config();
    let ctx = RoundContext {
        spec: &spec,
        w: &w,
        cfg: &engine,
        validation: &data.validation.samples,
        streams: Streams::new(cfg.seed),
    };
    let (gamma, alpha, n) = (engine.lr, engine.momentum, cfg.topology.n as f64);
    let linf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut states = build_agents(&cfg, &spec, &data.train).map_err(e2s)?;
    let mut xbar_prev = mean_model(&states).values;
    let mut ubar_prev = mean_momentum(&states).values;
    let mut s_prev = xbar_prev.clone();
    let (mut worst_s, mut worst_u, mut worst_x) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=cfg.train.rounds {
        let (next, trace) = run_round(Algorithm::Ross, &states, &ctx, t).map_err(e2s)?;
        states = next;
        let xbar = mean_model(&states).values;
        let ubar = mean_momentum(&states).values;
        let d = xbar.len();
        let mut gsum = vec![0.0; d];
        for a in &trace.agents {
            for k in 0..d {
                gsum[k] += a.aggregated.values[k];
            }
        }
        let s: Vec<f64> = (0..d).map(|k| xbar[k] / (1.0 - alpha) - alpha * xbar_prev[k] / (1.0 - alpha)).collect();
        let rs: Vec<f64> = (0..d).map(|k| s[k] - s_prev[k] + gamma / (n * (1.0 - alpha)) * gsum[k]).collect();
        let ru: Vec<f64> = (0..d).map(|k| ubar[k] - (alpha * ubar_prev[k] + gsum[k] / n)).collect();
        let rx: Vec<f64> = (0..d).map(|k| xbar[k] - (xbar_prev[k] - gamma * ubar[k])).collect();
        let (es, eu, ex) = (
            linf(&rs) / (1.0 + linf(&s)),
            linf(&ru) / (1.0 + linf(&ubar)),
            linf(&rx) / (1.0 + linf(&xbar)),
        );
        ensure(es <= 1e-8, || format!("round {t}: S-bar residual {es:e}"))?;
        ensure(eu <= 1e-9 && ex <= 1e-9, || format!("round {t}: mean residuals u {eu:e}, x {ex:e}"))?;
        worst_s = worst_s.max(es);
        worst_u = worst_u.max(eu);
        worst_x = worst_x.max(ex);
        s_prev = s;
        xbar_prev = xbar;
        ubar_prev = ubar;
    }
    // the engine's own per-round tracker must agree
    let out = run_experiment(&cfg, &RunOptions::default()).map_err(e2s)?;
    ensure(out.diagnostics.len() == 50, || format!("{} diagnostics rows", out.diagnostics.len()))?;
    Ok(format!(
        "50 rounds, N=8 ring, mu=0.25: S-bar {worst_s:.1e}, mean u {worst_u:.1e}, mean x {worst_x:.1e}"
    ))
}

fn gamma_branches() -> Outcome {
    let base = ConvergenceDiagnostics {
        smoothness: 1.0,
        sigma: 0.1,
        heterogeneity: 0.1,
        alpha: 0.5,
        gamma: 0.001,
        rho: 0.0,
        omega_min: 1.0,
        n_agents: 10,
    };
    let b = base.gamma_upper_bound().map_err(e2s)?;
    ensure(b.branches[0] == 2.0, || format!("branch 1 = {}", b.branches[0]))?;
    let expect2 = 0.5 / (8.0 * 3f64.sqrt());
    let e2 = (b.branches[1] - expect2).abs();
    ensure(e2 <= 1e-12, || format!("branch 2 = {}, expected {expect2}", b.branches[1]))?;
    let small = ConvergenceDiagnostics { omega_min: 0.1, ..base }.gamma_upper_bound().map_err(e2s)?;
    let disc = 0.0625 - 4.0 * (12.0f64 + 640000.0).powi(2);
    ensure(disc < 0.0 && !small.feasible[2], || "branch 3 not flagged infeasible at omega_min = 0.1".into())?;
    Ok(format!("branch 1 = 2, branch 2 error {e2:.1e}, branch 3 infeasible (discriminant {disc:.3e})"))
}

// ---------------------------------------------------------------- runs

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut csvs = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let cfg_path = tmp.path().join(format!("{name}.cfg"));
        std::fs::write(
            &cfg_path,
            format!(
                "out_dir = {}\ntopology.kind = full\ntopology.n = 10\nattack.kind = grad_poison\ntrain.rounds = 30\n\
                 train.batch = 64\noutput.shapley_dump = true\n",
                out.display()
            ),
        )
        .map_err(e2s)?;
        let res = Command::new(env!("CARGO_BIN_EXE_ross"))
            .arg("run")
            .arg(&cfg_path)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(e2s)?;
        ensure(res.status.success(), || String::from_utf8_lossy(&res.stderr).into_owned())?;
        let read = |f: &str| std::fs::read_to_string(out.join(f)).map_err(e2s);
        csvs.push((read("metrics.csv")?, read("diagnostics.jsonl")?, read("shapley.csv")?));
    }
    let (a, b) = (&csvs[0], &csvs[1]);
    ensure(metrics_without_wall_time(&a.0) == metrics_without_wall_time(&b.0), || "metrics differ".into())?;
    ensure(a.1 == b.1 && a.2 == b.2, || "diagnostics or Shapley dump differ".into())?;
    Ok(format!("two runs of 30 rounds: {} metric rows identical (wall_ms excluded)", a.0.lines().count() - 1))
}

#[derive(Default, Clone, Copy)]
struct Final {
    acc: f64,
    loss: f64,
}

fn robustness_ordering() -> Outcome {
    let settings: [(&str, Option<f64>, AttackKind); 4] = [
        ("long_tail", Some(0.25), AttackKind::None),
        ("data_noise", None, AttackKind::DataNoise),
        ("label_flip", None, AttackKind::LabelFlip),
        ("grad_poison", None, AttackKind::GradPoison),
    ];
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (label, mu, attack) in settings {
        let mut means: HashMap<Algorithm, Final> = HashMap::new();
        for algo in Algorithm::ALL {
            let mut acc = Final::default();
            for seed in 0..5u64 {
                let mut cfg = ExperimentConfig::parse_str(&format!(
                    "seed = {seed}\ntopology.kind = full\ntopology.n = 10\ndata.train_samples = 3000\n\
                     data.test_samples = 800\ndata.validation_fraction = 0.25\ndata.input_dim = 10\n\
                     data.num_classes = 3\nmodel.kind = logistic\ntrain.algo = {algo}\ntrain.lr = 0.001\n\
                     train.momentum = 0.5\ntrain.batch = 64\ntrain.rounds = 150\nattack.fraction = 0.3\n\
                     attack.sigma = 1.0\noutput.diagnostics = false\n"
                ))
                .map_err(e2s)?;
                cfg.attack.kind = attack;
                cfg.data.partition_mu = mu;
                let out = run_experiment(&cfg, &RunOptions::default()).map_err(e2s)?;
                let last = out.metrics.last().expect("metrics");
                acc.acc += last.test_acc / 5.0;
                acc.loss += last.avg_train_loss / 5.0;
            }
            means.insert(algo, acc);
        }
        let (r, m, p) = (means[&Algorithm::Ross], means[&Algorithm::Dmsgd], means[&Algorithm::Dpsgd]);
        lines.push(format!(
            "{label}: acc ross {:.3} / dmsgd {:.3} / dpsgd {:.3}, loss ross {:.3} / dmsgd {:.3}",
            r.acc, m.acc, p.acc, r.loss, m.loss
        ));
        if !(r.acc >= m.acc && r.acc >= p.acc && r.loss <= m.loss) {
            failures.push(label);
        }
    }
    let detail = lines.join("; ");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("ordering violated for {failures:?}: {detail}"))
    }
}

fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("ROSS_MNIST_DIR").map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join(ross::runner::MNIST_TRAIN_IMAGES).exists() && d.join(ross::runner::MNIST_TEST_IMAGES).exists())
}

fn mnist_smoke(dir: &Path) -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut finals = HashMap::new();
        for algo in [Algorithm::Ross, Algorithm::Dmsgd] {
            let mut cfg = ExperimentConfig::parse_str(&format!(
                "seed = {seed}\ndata.source = mnist\ndata.train_samples = 6000\ndata.test_samples = 2000\n\
                 data.partition_mu = 0.25\nmodel.kind = mlp\nmodel.hidden = 64\ntopology.kind = full\n\
                 topology.n = 10\ntrain.rounds = 60\ntrain.algo = {algo}\noutput.diagnostics = false\n\
                 shapley.validation_subsample = 200\n"
            ))
            .map_err(e2s)?;
            cfg.data.mnist_dir = Some(dir.to_path_buf());
            let out = run_experiment(&cfg, &RunOptions::default()).map_err(e2s)?;
            finals.insert(algo, (out.metrics[10].avg_train_loss, out.metrics[60].avg_train_loss, out.metrics[60].test_acc));
        }
        let (r10, r60, racc) = finals[&Algorithm::Ross];
        let macc = finals[&Algorithm::Dmsgd].2;
        ensure(r60 <= r10 / 2.0, || format!("seed {seed}: ross loss {r10:.4} -> {r60:.4} did not halve"))?;
        ensure(racc >= macc, || format!("seed {seed}: ross acc {racc:.4} < dmsgd {macc:.4}"))?;
        lines.push(format!("seed {seed}: loss {r10:.3}->{r60:.3}, acc ross {racc:.3} dmsgd {macc:.3}"));
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- driver

enum Status {
    Pass,
    Fail,
    Skip,
}

fn main() {
    let mnist = mnist_dir();
    type Check = Box<dyn Fn() -> Outcome>;
    let criteria: Vec<(&str, &str, Duration, Option<Check>)> = vec![
        ("shapley axioms", "efficiency/symmetry/linearity <= 1e-12, dummy exact", Duration::from_secs(5), Some(Box::new(shapley_axioms))),
        ("mc vs exact", "R=20000, max |dphi| <= 0.01", Duration::from_secs(30), Some(Box::new(mc_vs_exact))),
        ("gradient check", "relative error <= 1e-4", Duration::from_secs(10), Some(Box::new(gradient_check))),
        ("mixing matrices", "row sums 1e-12, symmetric, power-decay slack 1e-9, ring-4 rho 1e-12", Duration::from_secs(5), Some(Box::new(mixing_suite))),
        ("round identities", "S-bar <= 1e-8, means <= 1e-9 relative", Duration::from_secs(120), Some(Box::new(theory_identities))),
        ("determinism", "byte-identical metrics", Duration::from_secs(120), Some(Box::new(determinism))),
        ("robustness ordering", "ross acc >= dmsgd, dpsgd; ross loss <= dmsgd", Duration::from_secs(600), Some(Box::new(robustness_ordering))),
        (
            "mnist smoke",
            "loss(60) <= loss(10)/2, ross acc >= dmsgd",
            Duration::from_secs(1200),
            mnist.map(|d| Box::new(move || mnist_smoke(&d)) as Check),
        ),
        ("learning-rate bound", "branch 1 exact, branch 2 <= 1e-12, branch 3 infeasible", Duration::from_secs(1), Some(Box::new(gamma_branches))),
    ];

    let mut failed = 0;
    for (name, tolerance, budget, check) in criteria {
        let (status, detail, elapsed) = match check {
            None => (Status::Skip, "IDX files not found (set ROSS_MNIST_DIR)".to_string(), Duration::ZERO),
            Some(f) => {
                let start = Instant::now();
                let outcome = f();
                let elapsed = start.elapsed();
                match outcome {
                    Ok(d) if elapsed <= budget => (Status::Pass, d, elapsed),
                    Ok(d) => (Status::Fail, format!("{d}; over runtime budget {budget:?}"), elapsed),
                    Err(e) => (Status::Fail, e, elapsed),
                }
            }
        };
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("[{tag}] {name} [{tolerance}] ({:.1}s): {detail}", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
