//! Synchronous round loop for Shapley-weighted momentum gossip (ROSS) and
//! the D-PSGD / DMSGD baselines.
//!
//! A round is a sequence of barrier-separated phases. Every phase reads only
//! the immutable output of the previous phase, so agents within a phase can
//! be evaluated in any order or in parallel with bit-identical results.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{poison_gradient, AttackConfig, AttackKind, Dataset};
use crate::error::{Result, RossError};
use crate::model::{accuracy, loss_and_grad, ModelSpec, ParamVector, Sample};
use crate::rng::{Purpose, Streams};
use crate::shapley::{
    aggregation_weights, compute_shapley, AggregationWeights, CoalitionGame, ShapleyConfig,
    ShapleyVector,
};
use crate::topology::MixingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ross,
    Dpsgd,
    Dmsgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Ross, Algorithm::Dpsgd, Algorithm::Dmsgd];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Ross => "ross",
            Algorithm::Dpsgd => "dpsgd",
            Algorithm::Dmsgd => "dmsgd",
        })
    }
}

impl FromStr for Algorithm {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ross" => Ok(Algorithm::Ross),
            "dpsgd" => Ok(Algorithm::Dpsgd),
            "dmsgd" => Ok(Algorithm::Dmsgd),
            other => Err(RossError::config(format!(
                "unknown algorithm '{other}' (allowed: ross, dpsgd, dmsgd)"
            ))),
        }
    }
}

/// How agents within a phase are scheduled. Results never depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Parallel,
    Forward,
    Reverse,
}

/// How the received gradients are combined into `g_bar_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Shapley-derived weights `pi_{i,j}`.
    Shapley,
    /// `g_bar_i = g_{i,i}`; the DMSGD update through the ROSS code path.
    SelfOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub attack: AttackConfig,
    pub shapley: ShapleyConfig,
    /// Keep per-agent gradients, candidates and pre-gossip vectors in the trace.
    pub keep_full_trace: bool,
    pub schedule: Schedule,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            lr: 0.001,
            momentum: 0.5,
            batch: 260,
            attack: AttackConfig::default(),
            shapley: ShapleyConfig::default(),
            keep_full_trace: false,
            schedule: Schedule::Parallel,
        }
    }
}

/// Immutable per-agent data: shard indices into the training set, the
/// (possibly attacked) local samples, and the malicious flag.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentData {
    pub shard: Vec<usize>,
    pub local: Vec<Sample>,
    pub malicious: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: usize,
    /// Local model `x_i`.
    pub x: ParamVector,
    /// Momentum buffer `u_i`.
    pub u: ParamVector,
    pub data: Arc<AgentData>,
}

impl AgentState {
    pub fn new(id: usize, x: ParamVector, data: Arc<AgentData>) -> Self {
        let d = x.len();
        AgentState {
            id,
            x,
            u: ParamVector::zeros(d),
            data,
        }
    }

    pub fn malicious(&self) -> bool {
        self.data.malicious
    }
}

/// Message and payload accounting for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommStats {
    pub model_messages: usize,
    pub gradient_messages: usize,
    pub gossip_messages: usize,
    /// Doubles sent in phase 1, the model broadcast.
    pub phase1_doubles: usize,
    /// Doubles sent back as cross-gradient replies.
    pub reply_doubles: usize,
    /// Doubles sent in phase 2, the gossip of the pre-gossip vectors.
    pub phase2_doubles: usize,
}

impl CommStats {
    pub fn bytes(&self) -> u64 {
        8 * (self.phase1_doubles + self.reply_doubles + self.phase2_doubles) as u64
    }
}

/// What one agent did in one round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentTrace {
    pub agent: usize,
    /// `N_i`, ascending, including the agent.
    pub members: Vec<usize>,
    pub shapley: Option<ShapleyVector>,
    pub weights: Option<AggregationWeights>,
    pub coalition_evaluations: usize,
    /// `g_bar_i`, the gradient that enters the momentum update.
    pub aggregated: ParamVector,
    /// Full-trace fields; empty unless requested.
    pub local_grad: Option<ParamVector>,
    pub received: Vec<ParamVector>,
    pub candidates: Vec<ParamVector>,
    pub u_hat: Option<ParamVector>,
    pub x_hat: Option<ParamVector>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundTrace {
    pub round: usize,
    pub agents: Vec<AgentTrace>,
    pub comm: CommStats,
}

impl RoundTrace {
    /// `sum_i g_bar_i`.
    pub fn aggregated_sum(&self) -> ParamVector {
        let d = self.agents.first().map_or(0, |a| a.aggregated.len());
        let mut acc = ParamVector::zeros(d);
        for a in &self.agents {
            acc.axpy(1.0, &a.aggregated);
        }
        acc
    }
}

/// Everything a round reads besides the agent states.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub spec: &'a ModelSpec,
    pub w: &'a MixingMatrix,
    pub cfg: &'a EngineConfig,
    pub validation: &'a [Sample],
    pub streams: Streams,
}

fn map_agents<T, F>(n: usize, schedule: Schedule, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match schedule {
        Schedule::Parallel => (0..n).into_par_iter().map(f).collect(),
        Schedule::Forward => (0..n).map(f).collect(),
        Schedule::Reverse => {
            let mut out: Vec<T> = (0..n).rev().map(f).collect::<Result<_>>()?;
            out.reverse();
            Ok(out)
        }
    }
}

fn check_finite(v: &ParamVector, agent: usize, phase: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(RossError::numeric(format!("agent {agent}, phase {phase}")))
    }
}

fn with_agent<T>(r: Result<T>, agent: usize, phase: &str) -> Result<T> {
    r.map_err(|e| match e {
        RossError::Numeric { context } => {
            RossError::numeric(format!("agent {agent}, phase {phase}: {context}"))
        }
        other => other,
    })
}

fn check_consistent(states: &[AgentState], ctx: &RoundContext<'_>, t: usize) -> Result<()> {
    if t == 0 {
        return Err(RossError::precondition("rounds are numbered from 1"));
    }
    if states.len() != ctx.w.n() || ctx.w.neighbors.len() != states.len() {
        return Err(RossError::precondition(format!(
            "{} agents but mixing matrix is {}x{}",
            states.len(),
            ctx.w.n(),
            ctx.w.n()
        )));
    }
    if let Some(s) = states.iter().enumerate().find(|(i, s)| s.id != *i) {
        return Err(RossError::precondition(format!("agent at position {} has id {}", s.0, s.1.id)));
    }
    Ok(())
}

/// Mini-batch `xi_{i,t}`: `B` local samples without replacement, in shard order.
fn draw_batch(state: &AgentState, ctx: &RoundContext<'_>, t: usize) -> Result<Vec<Sample>> {
    let local = &state.data.local;
    if local.is_empty() {
        return Err(RossError::precondition(format!("agent {} has no local data", state.id)));
    }
    let b = ctx.cfg.batch.min(local.len());
    let mut rng = ctx.streams.stream(Purpose::Batch, state.id as u64, t as u64, 0);
    let mut idx = sample_indices(&mut rng, local.len(), b).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|k| local[k].clone()).collect())
}

/// Gradient an agent sends to `target`, poisoned when the agent is a
/// gradient-poisoning attacker (one independent draw per sent gradient).
fn outgoing_gradient(
    state: &AgentState,
    target: usize,
    model: &ParamVector,
    batch: &[Sample],
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<ParamVector> {
    let (_, g) = with_agent(loss_and_grad(ctx.spec, model, batch), state.id, "gradient")?;
    if state.malicious() && ctx.cfg.attack.kind == AttackKind::GradPoison {
        let mut rng = ctx
            .streams
            .stream(Purpose::Poison, state.id as u64, t as u64, target as u64);
        return Ok(poison_gradient(&g, ctx.cfg.attack.beta_range, &mut rng));
    }
    Ok(g)
}

fn validation_view(ctx: &RoundContext<'_>, agent: usize, t: usize) -> Vec<Sample> {
    match ctx.cfg.shapley.validation_subsample {
        Some(k) if k < ctx.validation.len() => {
            let mut rng = ctx
                .streams
                .stream(Purpose::ValidationSubsample, agent as u64, t as u64, 0);
            let mut idx = sample_indices(&mut rng, ctx.validation.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| ctx.validation[i].clone()).collect()
        }
        _ => ctx.validation.to_vec(),
    }
}

struct PreGossip {
    u_hat: ParamVector,
    x_hat: ParamVector,
    trace: AgentTrace,
}

/// Both gossip averages `sum_j w_ij u_hat_j` and `sum_j w_ij x_hat_j`.
fn gossip(
    states: &[AgentState],
    pre: &[PreGossip],
    ctx: &RoundContext<'_>,
) -> Result<Vec<AgentState>> {
    map_agents(states.len(), ctx.cfg.schedule, |i| {
        let d = states[i].x.len();
        let mut u = ParamVector::zeros(d);
        let mut x = ParamVector::zeros(d);
        for &j in &ctx.w.neighbors[i] {
            let w = ctx.w.weight(i, j);
            u.axpy(w, &pre[j].u_hat);
            x.axpy(w, &pre[j].x_hat);
        }
        check_finite(&x, i, "gossip")?;
        check_finite(&u, i, "gossip")?;
        Ok(AgentState {
            id: i,
            x,
            u,
            data: Arc::clone(&states[i].data),
        })
    })
}

fn comm_for(algo: Algorithm, edges: usize, d: usize) -> CommStats {
    let directed = 2 * edges;
    match algo {
        Algorithm::Ross => CommStats {
            model_messages: directed,
            gradient_messages: directed,
            gossip_messages: directed,
            phase1_doubles: directed * d,
            reply_doubles: directed * d,
            phase2_doubles: directed * 2 * d,
        },
        Algorithm::Dmsgd => CommStats {
            gossip_messages: directed,
            phase2_doubles: directed * 2 * d,
            ..CommStats::default()
        },
        Algorithm::Dpsgd => CommStats {
            gossip_messages: directed,
            phase2_doubles: directed * d,
            ..CommStats::default()
        },
    }
}

/// One ROSS round.
pub fn ross_round(
    states: &[AgentState],
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<(Vec<AgentState>, RoundTrace)> {
    ross_round_with(states, ctx, t, Aggregation::Shapley)
}

/// One ROSS round with a selectable aggregation rule.
pub fn ross_round_with(
    states: &[AgentState],
    ctx: &RoundContext<'_>,
    t: usize,
    aggregation: Aggregation,
) -> Result<(Vec<AgentState>, RoundTrace)> {
    check_consistent(states, ctx, t)?;
    let n = states.len();
    let nb = &ctx.w.neighbors;
    let (gamma, alpha) = (ctx.cfg.lr, ctx.cfg.momentum);

    // Phase 1: every agent draws its batch and evaluates every neighbor's
    // model on it. sent[i][k] = g_{i, nb[i][k]}.
    let sent: Vec<Vec<ParamVector>> = map_agents(n, ctx.cfg.schedule, |i| {
        let batch = draw_batch(&states[i], ctx, t)?;
        nb[i]
            .iter()
            .map(|&j| outgoing_gradient(&states[i], j, &states[j].x, &batch, ctx, t))
            .collect()
    })?;

    // Phase 2: candidates, Shapley weights, aggregation, local momentum step.
    let pre: Vec<PreGossip> = map_agents(n, ctx.cfg.schedule, |i| {
        let members = nb[i].clone();
        let received: Vec<ParamVector> = members
            .iter()
            .map(|&j| {
                let pos = nb[j].binary_search(&i).expect("symmetric neighbor lists");
                sent[j][pos].clone()
            })
            .collect();
        let self_pos = members.binary_search(&i).expect("agent is its own neighbor");
        let x_prev = &states[i].x;

        let mut trace = AgentTrace {
            agent: i,
            members: members.clone(),
            ..AgentTrace::default()
        };
        let candidates: Vec<ParamVector> = received
            .iter()
            .map(|g| x_prev.minus_scaled(gamma, g))
            .collect();

        let aggregated = match aggregation {
            Aggregation::SelfOnly => received[self_pos].clone(),
            Aggregation::Shapley => {
                let validation = validation_view(ctx, i, t);
                let mut game = with_agent(
                    CoalitionGame::new(members.clone(), candidates.clone(), ctx.spec, &validation),
                    i,
                    "candidates",
                )?;
                let mut rng = ctx.streams.stream(Purpose::Shapley, i as u64, t as u64, 0);
                let sv = with_agent(
                    compute_shapley(&mut game, &ctx.cfg.shapley, &mut rng),
                    i,
                    "shapley",
                )?;
                let omega: Vec<f64> = members.iter().map(|&j| ctx.w.weight(i, j)).collect();
                let weights = aggregation_weights(&sv.normalized, &omega)?;
                let mut agg = ParamVector::zeros(x_prev.len());
                for (p, g) in weights.pi.iter().zip(&received) {
                    agg.axpy(*p, g);
                }
                trace.coalition_evaluations = game.evaluations();
                trace.shapley = Some(sv);
                trace.weights = Some(weights);
                agg
            }
        };
        check_finite(&aggregated, i, "aggregation")?;

        let mut u_hat = states[i].u.scaled(alpha);
        u_hat.axpy(1.0, &aggregated);
        let x_hat = x_prev.minus_scaled(gamma, &u_hat);
        check_finite(&x_hat, i, "momentum step")?;

        trace.aggregated = aggregated;
        if ctx.cfg.keep_full_trace {
            trace.local_grad = Some(received[self_pos].clone());
            trace.received = received;
            trace.candidates = candidates;
            trace.u_hat = Some(u_hat.clone());
            trace.x_hat = Some(x_hat.clone());
        }
        Ok(PreGossip { u_hat, x_hat, trace })
    })?;

    // Phase 3: gossip from the pre-gossip snapshot.
    let next = gossip(states, &pre, ctx)?;
    let d = states.first().map_or(0, |s| s.x.len());
    let trace = RoundTrace {
        round: t,
        agents: pre.into_iter().map(|p| p.trace).collect(),
        comm: comm_for(Algorithm::Ross, ctx.w.edge_count(), d),
    };
    Ok((next, trace))
}

/// One DMSGD round: momentum step on the local gradient, then gossip of
/// both the momentum buffer and the model.
pub fn dmsgd_round(
    states: &[AgentState],
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<(Vec<AgentState>, RoundTrace)> {
    check_consistent(states, ctx, t)?;
    let n = states.len();
    let (gamma, alpha) = (ctx.cfg.lr, ctx.cfg.momentum);
    let pre: Vec<PreGossip> = map_agents(n, ctx.cfg.schedule, |i| {
        let s = &states[i];
        let batch = draw_batch(s, ctx, t)?;
        let g = outgoing_gradient(s, i, &s.x, &batch, ctx, t)?;
        let mut u_hat = s.u.scaled(alpha);
        u_hat.axpy(1.0, &g);
        let x_hat = s.x.minus_scaled(gamma, &u_hat);
        check_finite(&x_hat, i, "momentum step")?;
        let mut trace = AgentTrace {
            agent: i,
            members: ctx.w.neighbors[i].clone(),
            aggregated: g.clone(),
            ..AgentTrace::default()
        };
        if ctx.cfg.keep_full_trace {
            trace.local_grad = Some(g);
            trace.u_hat = Some(u_hat.clone());
            trace.x_hat = Some(x_hat.clone());
        }
        Ok(PreGossip { u_hat, x_hat, trace })
    })?;
    let next = gossip(states, &pre, ctx)?;
    let d = states.first().map_or(0, |s| s.x.len());
    let trace = RoundTrace {
        round: t,
        agents: pre.into_iter().map(|p| p.trace).collect(),
        comm: comm_for(Algorithm::Dmsgd, ctx.w.edge_count(), d),
    };
    Ok((next, trace))
}

/// One D-PSGD round: mix the previous models, then take the local
/// gradient step evaluated at the agent's previous model.
pub fn dpsgd_round(
    states: &[AgentState],
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<(Vec<AgentState>, RoundTrace)> {
    check_consistent(states, ctx, t)?;
    let n = states.len();
    let gamma = ctx.cfg.lr;
    let out: Vec<(AgentState, AgentTrace)> = map_agents(n, ctx.cfg.schedule, |i| {
        let s = &states[i];
        let batch = draw_batch(s, ctx, t)?;
        let g = outgoing_gradient(s, i, &s.x, &batch, ctx, t)?;
        let mut x = ParamVector::zeros(s.x.len());
        for &j in &ctx.w.neighbors[i] {
            x.axpy(ctx.w.weight(i, j), &states[j].x);
        }
        x.axpy(-gamma, &g);
        check_finite(&x, i, "gossip step")?;
        let mut trace = AgentTrace {
            agent: i,
            members: ctx.w.neighbors[i].clone(),
            aggregated: g.clone(),
            ..AgentTrace::default()
        };
        if ctx.cfg.keep_full_trace {
            trace.local_grad = Some(g);
        }
        Ok((
            AgentState {
                id: i,
                x,
                u: s.u.clone(),
                data: Arc::clone(&s.data),
            },
            trace,
        ))
    })?;
    let d = states.first().map_or(0, |s| s.x.len());
    let (next, agents): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((
        next,
        RoundTrace {
            round: t,
            agents,
            comm: comm_for(Algorithm::Dpsgd, ctx.w.edge_count(), d),
        },
    ))
}

pub fn run_round(
    algo: Algorithm,
    states: &[AgentState],
    ctx: &RoundContext<'_>,
    t: usize,
) -> Result<(Vec<AgentState>, RoundTrace)> {
    match algo {
        Algorithm::Ross => ross_round(states, ctx, t),
        Algorithm::Dpsgd => dpsgd_round(states, ctx, t),
        Algorithm::Dmsgd => dmsgd_round(states, ctx, t),
    }
}

/// `x_bar = (1/N) sum_i x_i`.
pub fn mean_model(states: &[AgentState]) -> ParamVector {
    ParamVector::mean_of(states.iter().map(|s| &s.x))
}

/// `u_bar = (1/N) sum_i u_i`.
pub fn mean_momentum(states: &[AgentState]) -> ParamVector {
    ParamVector::mean_of(states.iter().map(|s| &s.u))
}

/// `(1/N) sum_i ||x_i - x_bar||^2`.
pub fn consensus_distance(states: &[AgentState]) -> f64 {
    let mean = mean_model(states);
    states
        .iter()
        .map(|s| {
            s.x.values
                .iter()
                .zip(&mean.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / states.len() as f64
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    /// Full-training-set loss at the mean model.
    pub avg_train_loss: f64,
    /// Squared norm of the full-training-set gradient at the mean model.
    pub grad_norm_sq: f64,
    pub consensus_dist: f64,
    pub test_acc: f64,
    /// Cumulative bytes sent up to and including this round.
    pub comm_bytes: u64,
    pub wall_ms: u64,
}

/// Deterministic full-dataset metrics at the mean model. Non-finite
/// metrics are a numeric failure.
pub fn compute_metrics(
    states: &[AgentState],
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<MetricsRecord> {
    let mean = mean_model(states);
    let (loss, grad) = loss_and_grad(spec, &mean, &train.samples)?;
    let record = MetricsRecord {
        round: 0,
        avg_train_loss: loss,
        grad_norm_sq: grad.norm_sq(),
        consensus_dist: consensus_distance(states),
        test_acc: accuracy(spec, &mean, &test.samples)?,
        comm_bytes: 0,
        wall_ms: 0,
    };
    for (name, v) in [
        ("avg_train_loss", record.avg_train_loss),
        ("grad_norm_sq", record.grad_norm_sq),
        ("consensus_dist", record.consensus_dist),
    ] {
        if !v.is_finite() {
            return Err(RossError::numeric(format!("metrics: {name} = {v} (agent models diverged)")));
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::model::init_params;
    use crate::topology::{build_topology, metropolis_weights, TopologyKind};

    struct Fixture {
        spec: ModelSpec,
        w: MixingMatrix,
        validation: Vec<Sample>,
        states: Vec<AgentState>,
    }

    fn fixture(kind: TopologyKind, n: usize, malicious: &[usize]) -> Fixture {
        let spec = ModelSpec::logistic(4, 3);
        let ds = gen_blobs(1, 60 * n + 100, 4, 3, 2.0).unwrap();
        let validation = ds.samples[..100].to_vec();
        let w = metropolis_weights(&build_topology(kind, n).unwrap()).unwrap();
        let x0 = init_params(&spec, 3);
        let states = (0..n)
            .map(|i| {
                let shard: Vec<usize> = (100 + 60 * i..100 + 60 * (i + 1)).collect();
                let local = shard.iter().map(|&k| ds.samples[k].clone()).collect();
                let data = AgentData { shard, local, malicious: malicious.contains(&i) };
                AgentState::new(i, x0.clone(), Arc::new(data))
            })
            .collect();
        Fixture { spec, w, validation, states }
    }

    fn cfg() -> EngineConfig {
        EngineConfig { lr: 0.05, batch: 16, ..EngineConfig::default() }
    }

    fn ctx<'a>(f: &'a Fixture, cfg: &'a EngineConfig) -> RoundContext<'a> {
        RoundContext {
            spec: &f.spec,
            w: &f.w,
            cfg,
            validation: &f.validation,
            streams: Streams::new(11),
        }
    }

    #[test]
    fn single_agent_reduces_to_sgd() {
        let mut f = fixture(TopologyKind::Full, 2, &[]);
        f.states.truncate(1);
        f.w = MixingMatrix::trivial();
        let c = EngineConfig { momentum: 0.0, keep_full_trace: true, ..cfg() };
        let cx = ctx(&f, &c);
        let (next, trace) = ross_round(&f.states, &cx, 1).unwrap();
        let g = trace.agents[0].local_grad.clone().unwrap();
        assert_eq!(trace.agents[0].weights.as_ref().unwrap().pi, vec![1.0]);
        assert_eq!(next[0].x, f.states[0].x.minus_scaled(c.lr, &g));
    }

    #[test]
    fn degenerate_full_graph_weights() {
        // zero learning rate: every candidate equals x_i, so all coalitions tie
        let f = fixture(TopologyKind::Full, 4, &[]);
        let c = EngineConfig { lr: 0.0, ..cfg() };
        let (_, trace) = ross_round(&f.states, &ctx(&f, &c), 1).unwrap();
        for a in &trace.agents {
            let sv = a.shapley.as_ref().unwrap();
            assert!(sv.degenerate);
            let pi = &a.weights.as_ref().unwrap().pi;
            for (k, &j) in a.members.iter().enumerate() {
                let expect = 1.0 / (f.w.weight(a.agent, j) * a.members.len() as f64);
                assert!((pi[k] - expect).abs() < 1e-12);
            }
            let omega: Vec<f64> = a.members.iter().map(|&j| f.w.weight(a.agent, j)).collect();
            assert!((a.weights.as_ref().unwrap().weighted_sum(&omega) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rounds_are_deterministic() {
        let f = fixture(TopologyKind::Ring, 5, &[1]);
        let c = cfg();
        let a = ross_round(&f.states, &ctx(&f, &c), 1).unwrap();
        let b = ross_round(&f.states, &ctx(&f, &c), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_does_not_change_results() {
        let f = fixture(TopologyKind::Bipartite, 6, &[0, 4]);
        for algo in Algorithm::ALL {
            let outs: Vec<_> = [Schedule::Parallel, Schedule::Forward, Schedule::Reverse]
                .into_iter()
                .map(|schedule| {
                    let c = EngineConfig {
                        schedule,
                        keep_full_trace: true,
                        attack: AttackConfig { kind: AttackKind::GradPoison, ..Default::default() },
                        ..cfg()
                    };
                    run_round(algo, &f.states, &ctx(&f, &c), 3).unwrap()
                })
                .collect();
            assert_eq!(outs[0], outs[1]);
            assert_eq!(outs[0], outs[2]);
        }
    }

    #[test]
    fn self_only_ross_equals_dmsgd() {
        let f = fixture(TopologyKind::Ring, 5, &[2]);
        let c = EngineConfig {
            attack: AttackConfig { kind: AttackKind::GradPoison, ..Default::default() },
            ..cfg()
        };
        let cx = ctx(&f, &c);
        let mut a = f.states.clone();
        let mut b = f.states.clone();
        for t in 1..=5 {
            a = ross_round_with(&a, &cx, t, Aggregation::SelfOnly).unwrap().0;
            b = dmsgd_round(&b, &cx, t).unwrap().0;
            assert_eq!(a, b, "round {t}");
        }
    }

    #[test]
    fn dmsgd_without_momentum_on_uniform_graph_is_averaged_sgd() {
        let f = fixture(TopologyKind::Full, 4, &[]);
        let c = EngineConfig { momentum: 0.0, keep_full_trace: true, ..cfg() };
        let (next, trace) = dmsgd_round(&f.states, &ctx(&f, &c), 1).unwrap();
        let steps: Vec<ParamVector> = f
            .states
            .iter()
            .zip(&trace.agents)
            .map(|(s, a)| s.x.minus_scaled(c.lr, a.local_grad.as_ref().unwrap()))
            .collect();
        let expect = ParamVector::mean_of(&steps);
        for s in &next {
            for (a, b) in s.x.values.iter().zip(&expect.values) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dpsgd_single_agent_is_sgd() {
        let mut f = fixture(TopologyKind::Full, 2, &[]);
        f.states.truncate(1);
        f.w = MixingMatrix::trivial();
        let c = EngineConfig { keep_full_trace: true, ..cfg() };
        let (next, trace) = dpsgd_round(&f.states, &ctx(&f, &c), 1).unwrap();
        let g = trace.agents[0].local_grad.as_ref().unwrap();
        assert_eq!(next[0].x, f.states[0].x.minus_scaled(c.lr, g));
    }

    #[test]
    fn dpsgd_pure_gossip_contracts_consensus() {
        let mut f = fixture(TopologyKind::Ring, 6, &[]);
        for (i, s) in f.states.iter_mut().enumerate() {
            s.x = init_params(&f.spec, 100 + i as u64);
        }
        let c = EngineConfig { lr: 0.0, ..cfg() };
        let cx = ctx(&f, &c);
        let mut states = f.states.clone();
        let mut prev = consensus_distance(&states);
        for t in 1..=20 {
            states = dpsgd_round(&states, &cx, t).unwrap().0;
            let cur = consensus_distance(&states);
            assert!(cur <= prev * (1.0 + 1e-12), "round {t}");
            prev = cur;
        }
    }

    #[test]
    fn momentum_buffers_start_at_zero() {
        let f = fixture(TopologyKind::Ring, 4, &[]);
        assert!(f.states.iter().all(|s| s.u.values.iter().all(|&v| v == 0.0)));
        assert!(f.states.iter().all(|s| s.x == f.states[0].x));
    }

    #[test]
    fn message_accounting() {
        let f = fixture(TopologyKind::Ring, 5, &[]);
        let c = cfg();
        let d = f.spec.param_count();
        let e = 5;
        let (_, t) = ross_round(&f.states, &ctx(&f, &c), 1).unwrap();
        assert_eq!(t.comm.model_messages, 2 * e);
        assert_eq!(t.comm.gradient_messages, 2 * e);
        assert_eq!(t.comm.gossip_messages, 2 * e);
        assert_eq!(t.comm.phase1_doubles, 2 * e * d);
        assert_eq!(t.comm.reply_doubles, 2 * e * d);
        assert_eq!(t.comm.phase2_doubles, 2 * e * 2 * d);
        assert_eq!(t.comm.bytes(), 8 * (8 * e * d) as u64);
        let (_, t) = dmsgd_round(&f.states, &ctx(&f, &c), 1).unwrap();
        assert_eq!(t.comm.bytes(), 8 * (2 * e * 2 * d) as u64);
    }

    #[test]
    fn nan_model_is_numeric_failure_naming_agent() {
        let mut f = fixture(TopologyKind::Ring, 4, &[]);
        f.states[2].x.values[0] = f64::NAN;
        let c = cfg();
        let err = ross_round(&f.states, &ctx(&f, &c), 1).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("agent"), "{err}");
    }

    #[test]
    fn round_zero_is_rejected() {
        let f = fixture(TopologyKind::Ring, 4, &[]);
        let c = cfg();
        assert!(ross_round(&f.states, &ctx(&f, &c), 0).is_err());
    }

    #[test]
    fn consensus_examples() {
        let data = Arc::new(AgentData { shard: vec![], local: vec![], malicious: false });
        let v = ParamVector::new(vec![1.0, -2.0, 2.0]);
        let same = vec![
            AgentState::new(0, v.clone(), data.clone()),
            AgentState::new(1, v.clone(), data.clone()),
        ];
        assert_eq!(consensus_distance(&same), 0.0);
        let opposite = vec![
            AgentState::new(0, v.clone(), data.clone()),
            AgentState::new(1, v.scaled(-1.0), data),
        ];
        assert_eq!(mean_model(&opposite).values, vec![0.0; 3]);
        assert_eq!(consensus_distance(&opposite), v.norm_sq());
    }
}
