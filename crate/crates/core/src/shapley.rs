//! Coalition games over candidate models, exact and Monte-Carlo Shapley
//! values, min-max normalization, and the aggregation weights derived from
//! them.
//!
//! Coalitions are bitmasks over member positions (bit `k` = `members[k]`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};
use crate::model::{accuracy, ModelSpec, ParamVector, Sample};
use crate::rng::StreamRng;

/// Largest member count accepted by [`exact_shapley`].
pub const EXACT_MAX_PLAYERS: usize = 12;
/// Largest member count representable as a bitmask.
pub const MAX_PLAYERS: usize = 63;

/// A cooperative game with transferable utility over `players()` players.
pub trait CharacteristicFn {
    fn players(&self) -> usize;
    fn value(&mut self, mask: u64) -> f64;
}

/// Game given by an explicit value table indexed by mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularGame {
    n: usize,
    values: Vec<f64>,
}

impl TabularGame {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n > 20 || values.len() != 1usize << n {
            return Err(RossError::precondition(format!(
                "value table for {n} players must have 2^{n} entries"
            )));
        }
        Ok(TabularGame { n, values })
    }

    pub fn table(&self) -> &[f64] {
        &self.values
    }
}

impl CharacteristicFn for TabularGame {
    fn players(&self) -> usize {
        self.n
    }

    fn value(&mut self, mask: u64) -> f64 {
        self.values[mask as usize]
    }
}

/// The per-agent, per-round game: the value of a coalition is the
/// validation accuracy of the unweighted mean of its members' candidate
/// models, and the empty coalition is worth 0.
#[derive(Debug, Clone)]
pub struct CoalitionGame<'a> {
    pub members: Vec<usize>,
    candidates: Vec<ParamVector>,
    spec: &'a ModelSpec,
    validation: &'a [Sample],
    cache: HashMap<u64, f64>,
}

impl<'a> CoalitionGame<'a> {
    pub fn new(
        members: Vec<usize>,
        candidates: Vec<ParamVector>,
        spec: &'a ModelSpec,
        validation: &'a [Sample],
    ) -> Result<Self> {
        if members.is_empty() || members.len() > MAX_PLAYERS {
            return Err(RossError::precondition(format!(
                "coalition game needs 1..={MAX_PLAYERS} members, got {}",
                members.len()
            )));
        }
        if candidates.len() != members.len() {
            return Err(RossError::precondition("one candidate model per member required"));
        }
        if validation.is_empty() {
            return Err(RossError::precondition("validation set is empty"));
        }
        if let Some(k) = candidates.iter().position(|c| !c.is_finite()) {
            return Err(RossError::numeric(format!("candidate model for member {}", members[k])));
        }
        Ok(CoalitionGame {
            members,
            candidates,
            spec,
            validation,
            cache: HashMap::new(),
        })
    }

    /// Distinct coalitions evaluated so far (the empty one is never evaluated).
    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }

    pub fn candidates(&self) -> &[ParamVector] {
        &self.candidates
    }

    fn full_mask(&self) -> u64 {
        full_mask(self.members.len())
    }

    /// `v(mask)`, memoized per mask.
    pub fn coalition_value(&mut self, mask: u64) -> Result<f64> {
        if mask & !self.full_mask() != 0 {
            return Err(RossError::precondition(format!(
                "coalition mask {mask:#x} is not a subset of the members"
            )));
        }
        if mask == 0 {
            return Ok(0.0);
        }
        if let Some(&v) = self.cache.get(&mask) {
            return Ok(v);
        }
        let averaged = ParamVector::mean_of(
            (0..self.members.len())
                .filter(|k| mask >> k & 1 == 1)
                .map(|k| &self.candidates[k]),
        );
        let v = accuracy(self.spec, &averaged, self.validation)?;
        self.cache.insert(mask, v);
        Ok(v)
    }
}

impl CharacteristicFn for CoalitionGame<'_> {
    fn players(&self) -> usize {
        self.members.len()
    }

    fn value(&mut self, mask: u64) -> f64 {
        // Inputs were validated at construction; the only failure left is a
        // malformed mask, which is a programming error here.
        self.coalition_value(mask)
            .expect("coalition value on a validated game")
    }
}

fn full_mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley values by full enumeration of the coalitions not containing
/// each player, weighted by `1 / (n * C(n-1, |S|))`.
pub fn exact_shapley<G: CharacteristicFn>(game: &mut G) -> Result<Vec<f64>> {
    let n = game.players();
    if n == 0 {
        return Err(RossError::precondition("game has no players"));
    }
    if n > EXACT_MAX_PLAYERS {
        return Err(RossError::precondition(format!(
            "exact Shapley limited to {EXACT_MAX_PLAYERS} players, got {n}; use Monte Carlo"
        )));
    }
    let masks = 1usize << n;
    let values: Vec<f64> = (0..masks as u64).map(|m| game.value(m)).collect();
    let weights: Vec<f64> = (0..n).map(|s| 1.0 / (n as f64 * binomial(n - 1, s))).collect();
    let mut phi = vec![0.0; n];
    for (j, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for s in 0..masks {
            if s & bit != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            *p += weights[size] * (values[s | bit] - values[s]);
        }
    }
    Ok(phi)
}

/// Permutation-sampling estimate: `r` uniformly random orderings, each
/// member accumulating its marginal contribution divided by `r`.
pub fn mc_shapley<G: CharacteristicFn>(game: &mut G, r: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(RossError::precondition("Monte-Carlo Shapley needs R >= 1"));
    }
    let n = game.players();
    if n == 0 || n > MAX_PLAYERS {
        return Err(RossError::precondition(format!("unsupported player count {n}")));
    }
    let rf = r as f64;
    let empty = game.value(0);
    let mut phi = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..r {
        order.shuffle(rng);
        let mut mask = 0u64;
        let mut prev = empty;
        for &j in &order {
            mask |= 1 << j;
            let cur = game.value(mask);
            phi[j] += (cur - prev) / rf;
            prev = cur;
        }
    }
    Ok(phi)
}

/// Min-max rescaling to `[0, 1]`. When `max - min < 1e-12` every entry
/// becomes 1 and the result is flagged degenerate.
pub fn normalize_minmax(raw: &[f64]) -> Result<(Vec<f64>, bool)> {
    if raw.is_empty() {
        return Err(RossError::precondition("cannot normalize an empty Shapley vector"));
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range >= 1e-12) {
        return Ok((vec![1.0; raw.len()], true));
    }
    Ok((raw.iter().map(|v| (v - min) / range).collect(), false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub degenerate: bool,
}

impl ShapleyVector {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let (normalized, degenerate) = normalize_minmax(&raw)?;
        Ok(ShapleyVector {
            raw,
            normalized,
            degenerate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub pi: Vec<f64>,
}

impl AggregationWeights {
    /// `sum_j omega_j * pi_j`, which is 1 by construction.
    pub fn weighted_sum(&self, omega_row: &[f64]) -> f64 {
        self.pi.iter().zip(omega_row).map(|(p, w)| p * w).sum()
    }
}

/// `pi_j = phi_hat_j / (omega_j * sum_k phi_hat_k)`.
///
/// The weights are not normalized to sum to one; only
/// `sum_j omega_j * pi_j = 1` holds.
pub fn aggregation_weights(phi_hat: &[f64], omega_row: &[f64]) -> Result<AggregationWeights> {
    if phi_hat.len() != omega_row.len() || phi_hat.is_empty() {
        return Err(RossError::precondition(
            "normalized Shapley values and mixing weights must align",
        ));
    }
    if let Some(k) = omega_row.iter().position(|&w| !(w > 0.0)) {
        return Err(RossError::precondition(format!(
            "mixing weight for member position {k} is not positive"
        )));
    }
    let total: f64 = phi_hat.iter().sum();
    if !(total > 0.0) {
        return Err(RossError::precondition("normalized Shapley values sum to zero"));
    }
    Ok(AggregationWeights {
        pi: phi_hat
            .iter()
            .zip(omega_row)
            .map(|(p, w)| p / (w * total))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapleyMode {
    /// Exact up to `exact_max_players`, Monte Carlo above.
    Auto,
    Exact,
    Mc,
}

impl FromStr for ShapleyMode {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ShapleyMode::Auto),
            "exact" => Ok(ShapleyMode::Exact),
            "mc" => Ok(ShapleyMode::Mc),
            other => Err(RossError::config(format!(
                "unknown shapley mode '{other}' (allowed: auto, exact, mc)"
            ))),
        }
    }
}

impl std::fmt::Display for ShapleyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapleyMode::Auto => "auto",
            ShapleyMode::Exact => "exact",
            ShapleyMode::Mc => "mc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    pub mode: ShapleyMode,
    /// Permutations for Monte Carlo; `None` means `max(2 * |N_i|, 16)`.
    pub mc_rounds: Option<usize>,
    pub exact_max_players: usize,
    /// Validation samples per (agent, round); `None` uses the full set.
    pub validation_subsample: Option<usize>,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig {
            mode: ShapleyMode::Auto,
            mc_rounds: None,
            exact_max_players: 8,
            validation_subsample: None,
        }
    }
}

pub fn default_mc_rounds(players: usize) -> usize {
    (2 * players).max(16)
}

impl ShapleyConfig {
    pub fn uses_exact(&self, players: usize) -> bool {
        match self.mode {
            ShapleyMode::Exact => true,
            ShapleyMode::Mc => false,
            ShapleyMode::Auto => players <= self.exact_max_players,
        }
    }

    pub fn rounds_for(&self, players: usize) -> usize {
        self.mc_rounds.unwrap_or_else(|| default_mc_rounds(players))
    }
}

/// Raw values by the configured method, then normalized.
pub fn compute_shapley<G: CharacteristicFn>(
    game: &mut G,
    cfg: &ShapleyConfig,
    rng: &mut StreamRng,
) -> Result<ShapleyVector> {
    let n = game.players();
    let raw = if cfg.uses_exact(n) {
        exact_shapley(game)?
    } else {
        mc_shapley(game, cfg.rounds_for(n), rng)?
    };
    ShapleyVector::from_raw(raw)
}

/// Header of the per-round Shapley dump.
pub const SHAPLEY_DUMP_HEADER: &str = "round,agent,neighbor,phi,phi_hat,pi";

/// Dump rows for one agent in one round.
pub fn shapley_dump_rows(
    round: usize,
    agent: usize,
    members: &[usize],
    sv: &ShapleyVector,
    weights: &AggregationWeights,
) -> String {
    let mut out = String::new();
    for (k, &j) in members.iter().enumerate() {
        writeln!(
            out,
            "{round},{agent},{j},{},{},{}",
            sv.raw[k], sv.normalized[k], weights.pi[k]
        )
        .expect("write to string");
    }
    out
}
