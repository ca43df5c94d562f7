//! Communication graphs, Metropolis mixing matrices, and spectral checks.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};
use crate::linalg::{symmetric_eigenvalues, symmetric_spectral_norm, SquareMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Full,
    Ring,
    Bipartite,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 3] = [TopologyKind::Full, TopologyKind::Ring, TopologyKind::Bipartite];

    pub fn min_agents(self) -> usize {
        match self {
            TopologyKind::Ring => 3,
            TopologyKind::Full | TopologyKind::Bipartite => 2,
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Full => "full",
            TopologyKind::Ring => "ring",
            TopologyKind::Bipartite => "bipartite",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = RossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TopologyKind::Full),
            "ring" => Ok(TopologyKind::Ring),
            "bipartite" => Ok(TopologyKind::Bipartite),
            other => Err(RossError::config(format!(
                "unknown topology '{other}' (allowed: full, ring, bipartite)"
            ))),
        }
    }
}

/// Undirected graph on agents `0..n`. Every node is implicitly its own neighbor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    /// Edges `(i, j)` with `i < j`; self-loops are not stored.
    edges: BTreeSet<(usize, usize)>,
    complete: bool,
}

impl Graph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(RossError::config("graph needs at least one node"));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(RossError::config(format!("edge ({a},{b}) outside 0..{n}")));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let complete = set.len() == n * (n - 1) / 2;
        Ok(Graph {
            n,
            edges: set,
            complete,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges without self-loops, each once with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i == j || self.edges.contains(&(i.min(j), i.max(j)))
    }

    /// Degree excluding the self-loop.
    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == i || b == i).count()
    }

    /// `N_i`, ascending, including `i` itself.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn build_topology(kind: TopologyKind, n: usize) -> Result<Graph> {
    if n < kind.min_agents() {
        return Err(RossError::config(format!(
            "{kind} topology needs at least {} agents, got {n}",
            kind.min_agents()
        )));
    }
    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Full => (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect(),
        TopologyKind::Ring => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        TopologyKind::Bipartite => {
            let half = n.div_ceil(2);
            (0..half)
                .flat_map(|i| (half..n).map(move |j| (i, j)))
                .collect()
        }
    };
    Graph::from_edges(n, edges)
}

/// Symmetric doubly stochastic gossip matrix `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub w: SquareMatrix,
    /// Smallest positive entry, `omega_min`.
    pub omega_min: f64,
    /// Squared second-largest eigenvalue magnitude.
    pub rho: f64,
    /// `N_i` per agent, ascending, including the agent.
    pub neighbors: Vec<Vec<usize>>,
}

impl MixingMatrix {
    pub fn n(&self) -> usize {
        self.w.dim()
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w.get(i, j)
    }

    /// The single-agent matrix `W = [1]`.
    pub fn trivial() -> Self {
        MixingMatrix {
            w: SquareMatrix::identity(1),
            omega_min: 1.0,
            rho: 0.0,
            neighbors: vec![vec![0]],
        }
    }

    /// Number of undirected non-self edges implied by the neighbor lists.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|nb| nb.len() - 1).sum::<usize>() / 2
    }

    /// Checks every structural invariant of a mixing matrix.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.w.asymmetry() != 0.0 {
            return Err(RossError::invariant("mixing matrix is not exactly symmetric"));
        }
        for i in 0..n {
            let row = self.w.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(RossError::invariant(format!("row {i} sums to {sum}")));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(RossError::invariant(format!("entry ({i},{j}) = {v} outside [0,1]")));
                }
                let member = self.neighbors[i].binary_search(&j).is_ok();
                if member != (v > 0.0) {
                    return Err(RossError::invariant(format!(
                        "entry ({i},{j}) = {v} disagrees with the neighbor set"
                    )));
                }
            }
        }
        if !(self.omega_min > 0.0) {
            return Err(RossError::invariant("omega_min must be positive"));
        }
        Ok(())
    }

    /// One row per line, space-separated entries.
    pub fn dump_matrix(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n() {
            let row: Vec<String> = self.w.row(i).iter().map(|v| format!("{v}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    /// `i j w_ij` for every positive entry, including self-loops.
    pub fn dump_triples(&self) -> String {
        let mut s = String::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                writeln!(s, "{i} {j} {}", self.w.get(i, j)).expect("write to string");
            }
        }
        s
    }
}

/// Metropolis-Hastings weights; the complete graph gets uniform `1/N`.
pub fn metropolis_weights(g: &Graph) -> Result<MixingMatrix> {
    if !g.is_connected() {
        return Err(RossError::config("communication graph is disconnected"));
    }
    let n = g.n();
    let mut w = SquareMatrix::zeros(n);
    if g.is_complete() {
        w = SquareMatrix::filled(n, 1.0 / n as f64);
    } else {
        let deg: Vec<usize> = (0..n).map(|i| g.degree(i)).collect();
        for (i, j) in g.edges() {
            let v = 1.0 / (1 + deg[i].max(deg[j])) as f64;
            w.set(i, j, v);
            w.set(j, i, v);
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w.get(i, j)).sum();
            w.set(i, i, 1.0 - off);
        }
    }
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| g.neighbors(i)).collect();
    let omega_min = neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)))
        .map(|(i, j)| w.get(i, j))
        .fold(f64::INFINITY, f64::min);
    let rho = spectral_rho(&w)?;
    let m = MixingMatrix {
        w,
        omega_min,
        rho,
        neighbors,
    };
    m.validate()?;
    Ok(m)
}

/// `Q = (1/N) * ones`.
fn averaging_matrix(n: usize) -> SquareMatrix {
    SquareMatrix::filled(n, 1.0 / n as f64)
}

/// `(max{|lambda_2|, |lambda_N|})^2` of a symmetric doubly stochastic matrix.
pub fn spectral_rho(w: &SquareMatrix) -> Result<f64> {
    if w.asymmetry() != 0.0 {
        return Err(RossError::precondition("spectral_rho requires a symmetric matrix"));
    }
    let n = w.dim();
    if n == 1 {
        return Ok(0.0);
    }
    // W - Q keeps every non-principal eigenvalue and maps lambda_1 = 1 to 0.
    let deflated = w.sub(&averaging_matrix(n));
    let ev = symmetric_eigenvalues(&deflated)?;
    let lam = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let rho = lam * lam;
    if rho >= 1.0 - 1e-12 {
        return Err(RossError::config(format!(
            "graph not mixing: rho = {rho} (disconnected or periodic weights)"
        )));
    }
    Ok(rho)
}

/// Per-`t` comparison of `||(I - Q) W^t||_2` against `sqrt(rho)^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    /// Smallest `bound - norm` over all `t`.
    pub min_slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayRow {
    pub t: usize,
    pub norm: f64,
    pub bound: f64,
}

/// Verifies spectral-norm decay of `(I - Q) W^t` for `t = 1..=t_max`.
pub fn verify_power_decay(m: &MixingMatrix, t_max: usize) -> Result<DecayReport> {
    let n = m.n();
    let proj = SquareMatrix::identity(n).sub(&averaging_matrix(n));
    let sqrt_rho = m.rho.sqrt();
    let mut power = SquareMatrix::identity(n);
    let mut rows = Vec::with_capacity(t_max);
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    for t in 1..=t_max {
        power = power.matmul(&m.w);
        let mut target = proj.matmul(&power);
        // (I - Q) and W^t commute, so the product is symmetric up to rounding.
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (target.get(i, j) + target.get(j, i));
                target.set(i, j, avg);
                target.set(j, i, avg);
            }
        }
        let norm = symmetric_spectral_norm(&target)?;
        let bound = sqrt_rho.powi(t as i32);
        if norm > bound + 1e-9 {
            violations.push(t);
        }
        min_slack = min_slack.min(bound - norm);
        rows.push(DecayRow { t, norm, bound });
    }
    if !violations.is_empty() {
        return Err(RossError::invariant(format!(
            "spectral-norm decay violated at t = {violations:?}"
        )));
    }
    Ok(DecayReport { rows, min_slack })
}
