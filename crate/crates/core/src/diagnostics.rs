//! Convergence-theory calculators and exact runtime identities.
//!
//! The learning-rate condition and the constants `m1..m5` are evaluated from
//! user-supplied assumption constants. The auxiliary sequence
//! `S^t = x^t / (1 - a) - a x^{t-1} / (1 - a)` and the mean recursions of the
//! momentum gossip are checked against the engine's actual iterates.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};
use crate::model::ParamVector;

pub const SBAR_TOLERANCE: f64 = 1e-8;
pub const MEAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDiagnostics {
    /// `L`.
    pub smoothness: f64,
    /// `sigma`, the stochastic-gradient variance bound.
    pub sigma: f64,
    /// `varsigma`, the heterogeneity bound.
    pub heterogeneity: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    pub omega_min: f64,
    pub n_agents: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaBound {
    /// The three branch values; an infeasible branch holds NaN.
    pub branches: [f64; 3],
    pub feasible: [bool; 3],
    /// Minimum over feasible branches, `None` if all are infeasible.
    pub bound: Option<f64>,
}

impl GammaBound {
    pub fn admits(&self, gamma: f64) -> bool {
        self.bound.is_some_and(|b| gamma <= b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m5: f64,
}

impl ConvergenceDiagnostics {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.alpha > 0.0 && self.alpha < 1.0, "alpha must be in (0, 1)"),
            (self.smoothness > 0.0 && self.smoothness.is_finite(), "L must be positive"),
            ((0.0..1.0).contains(&self.rho), "rho must be in [0, 1)"),
            (self.omega_min > 0.0 && self.omega_min <= 1.0, "omega_min must be in (0, 1]"),
            (self.gamma > 0.0 && self.gamma.is_finite(), "gamma must be positive"),
            (self.sigma >= 0.0 && self.heterogeneity >= 0.0, "sigma and varsigma must be non-negative"),
            (self.n_agents >= 1, "at least one agent required"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(RossError::config(*msg)),
            None => Ok(()),
        }
    }

    fn inv_omega4(&self) -> f64 {
        self.omega_min.powi(-4)
    }

    pub fn gamma_upper_bound(&self) -> Result<GammaBound> {
        self.validate()?;
        let (a, l, w4) = (self.alpha, self.smoothness, self.inv_omega4());
        let b1 = a * l / (1.0 - a).powi(2);
        let b2 = (1.0 - a) * (1.0 - self.rho.sqrt()) / (8.0 * l * (w4 + 2.0).sqrt());
        let disc = (1.0 - a).powi(4) - 8.0 * l * l * a * (12.0 + 64.0 * w4).powi(2);
        let (b3, ok3) = if disc >= 0.0 {
            (((1.0 - a).powi(2) + disc.sqrt()) / (16.0 * l * (3.0 + 16.0 * w4)), true)
        } else {
            (f64::NAN, false)
        };
        let branches = [b1, b2, b3];
        let feasible = [true, true, ok3];
        let bound = branches
            .iter()
            .zip(feasible)
            .filter(|(_, f)| *f)
            .map(|(b, _)| *b)
            .reduce(f64::min);
        Ok(GammaBound { branches, feasible, bound })
    }

    pub fn constants(&self) -> Result<TheoremConstants> {
        self.validate()?;
        let (a, l, g) = (self.alpha, self.smoothness, self.gamma);
        let m1 = g / (2.0 * (1.0 - a)) - (1.0 - a) * g * g / (2.0 * a * l);
        let m2 = (a * l * g * g / (2.0 * (1.0 - a).powi(3)) + l * g * g / (2.0 * (1.0 - a).powi(2))) / m1;
        let m3 = l * (1.0 - a) / (2.0 * m1 * a);
        let m4 = l * a / (2.0 * m1 * (1.0 - a).powi(3));
        let m5 = l * l * g / (2.0 * m1 * (1.0 - a));
        Ok(TheoremConstants { m1, m2, m3, m4, m5 })
    }

    /// Right-hand side of the average-gradient-norm bound after `rounds`
    /// rounds, given `F(x_bar^0) - F*`.
    pub fn gradient_bound(&self, rounds: usize, initial_gap: f64) -> Result<f64> {
        let c = self.constants()?;
        if !(c.m1 > 0.0) {
            return Err(RossError::precondition(format!(
                "m1 = {} is not positive; the bound is vacuous for this gamma",
                c.m1
            )));
        }
        if rounds == 0 {
            return Err(RossError::precondition("rounds must be at least 1"));
        }
        let (a, l, g) = (self.alpha, self.smoothness, self.gamma);
        let w4 = self.inv_omega4();
        let (s2, v2) = (self.sigma.powi(2), self.heterogeneity.powi(2));
        let n = self.n_agents as f64;
        let m23 = c.m2 + c.m3 * g * g * a * a / (1.0 - a).powi(4);
        let drift = 8.0 * (w4 + 2.0) * (g * g * s2 + 4.0 * g * g * v2)
            / ((1.0 - a).powi(2) * (1.0 - self.rho.sqrt()).powi(2));
        Ok(initial_gap / (c.m1 * rounds as f64)
            + (m23 + c.m4) * (s2 * (4.0 * w4 + 6.0 / n) + 16.0 * w4 * v2)
            + 32.0 * l * l * w4 * m23 * drift
            + (16.0 * c.m4 * l * l * w4 + c.m5) * drift)
    }
}

fn linf(v: &ParamVector) -> f64 {
    v.max_abs()
}

fn sbar(xbar: &ParamVector, xbar_prev: Option<&ParamVector>, alpha: f64) -> ParamVector {
    match xbar_prev {
        None => xbar.clone(),
        Some(prev) => {
            let mut s = xbar.scaled(1.0 / (1.0 - alpha));
            s.axpy(-alpha / (1.0 - alpha), prev);
            s
        }
    }
}

/// Relative residual of `S^t - S^{t-1} = -gamma / (N (1 - a)) sum_i g_bar_i^t`
/// for a single round, given `x_bar` at `t-2` (if any), `t-1` and `t`.
pub fn sbar_step_residual(
    xbar_t2: Option<&ParamVector>,
    xbar_t1: &ParamVector,
    xbar_t: &ParamVector,
    gbar_sum: &ParamVector,
    n_agents: usize,
    gamma: f64,
    alpha: f64,
) -> f64 {
    let s_prev = sbar(xbar_t1, xbar_t2, alpha);
    let s_cur = sbar(xbar_t, Some(xbar_t1), alpha);
    let mut r = s_cur.clone();
    r.axpy(-1.0, &s_prev);
    r.axpy(gamma / (n_agents as f64 * (1.0 - alpha)), gbar_sum);
    linf(&r) / (1.0 + linf(&s_cur))
}

/// Checks the auxiliary-sequence identity over a whole run.
///
/// `xbar[t]` is the mean model after round `t` (with `xbar[0]` the initial
/// mean) and `gbar_sums[t-1]` is `sum_i g_bar_i^t`. Returns the largest
/// relative residual.
pub fn check_sbar_identity(
    xbar: &[ParamVector],
    gbar_sums: &[ParamVector],
    n_agents: usize,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    if xbar.len() < 2 || gbar_sums.len() + 1 != xbar.len() {
        return Err(RossError::precondition(
            "need x_bar for rounds 0..=T and one gradient sum per round, T >= 1",
        ));
    }
    let mut worst = 0.0f64;
    for t in 1..xbar.len() {
        let prev2 = if t >= 2 { Some(&xbar[t - 2]) } else { None };
        let r = sbar_step_residual(prev2, &xbar[t - 1], &xbar[t], &gbar_sums[t - 1], n_agents, gamma, alpha);
        if !(r <= SBAR_TOLERANCE) {
            return Err(RossError::invariant(format!(
                "auxiliary sequence identity violated at round {t}: relative residual {r:e}"
            )));
        }
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Means before and after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSnapshot {
    pub ubar: ParamVector,
    pub xbar: ParamVector,
}

/// Relative residuals of `u^t = a u^{t-1} + (1/N) sum g_bar` and
/// `x^t = x^{t-1} - gamma u^t` on the agent means.
pub fn mean_residuals(
    prev: &MeanSnapshot,
    cur: &MeanSnapshot,
    gbar_sum: &ParamVector,
    n_agents: usize,
    gamma: f64,
    alpha: f64,
) -> (f64, f64) {
    let mut u_pred = prev.ubar.scaled(alpha);
    u_pred.axpy(1.0 / n_agents as f64, gbar_sum);
    let mut ru = cur.ubar.clone();
    ru.axpy(-1.0, &u_pred);
    let x_pred = prev.xbar.minus_scaled(gamma, &cur.ubar);
    let mut rx = cur.xbar.clone();
    rx.axpy(-1.0, &x_pred);
    (
        linf(&ru) / (1.0 + linf(&cur.ubar)),
        linf(&rx) / (1.0 + linf(&cur.xbar)),
    )
}

/// As [`mean_residuals`], failing when either residual exceeds the tolerance.
pub fn check_mean_preservation(
    prev: &MeanSnapshot,
    cur: &MeanSnapshot,
    gbar_sum: &ParamVector,
    n_agents: usize,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, f64)> {
    let (ru, rx) = mean_residuals(prev, cur, gbar_sum, n_agents, gamma, alpha);
    if !(ru <= MEAN_TOLERANCE && rx <= MEAN_TOLERANCE) {
        return Err(RossError::invariant(format!(
            "gossip does not preserve means: u residual {ru:e}, x residual {rx:e}"
        )));
    }
    Ok((ru, rx))
}

/// One line of the diagnostics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub round: usize,
    pub sbar_residual: f64,
    /// `None` for algorithms without a momentum buffer.
    pub mean_resid_u: Option<f64>,
    pub mean_resid_x: f64,
}

/// Incremental per-round identity checker.
///
/// Without momentum buffers (D-PSGD) the checks run with `alpha = 0`, where
/// the mean model follows `x^t = x^{t-1} - (gamma / N) sum_i g_i`.
#[derive(Debug, Clone)]
pub struct IdentityTracker {
    gamma: f64,
    alpha: f64,
    n_agents: usize,
    has_momentum: bool,
    xbar_prev2: Option<ParamVector>,
    prev: MeanSnapshot,
}

impl IdentityTracker {
    pub fn new(initial: MeanSnapshot, n_agents: usize, gamma: f64, alpha: f64, has_momentum: bool) -> Self {
        IdentityTracker {
            gamma,
            alpha: if has_momentum { alpha } else { 0.0 },
            n_agents,
            has_momentum,
            xbar_prev2: None,
            prev: initial,
        }
    }

    pub fn observe(&mut self, round: usize, cur: MeanSnapshot, gbar_sum: &ParamVector) -> Result<DiagnosticsRow> {
        let sbar_residual = sbar_step_residual(
            self.xbar_prev2.as_ref(),
            &self.prev.xbar,
            &cur.xbar,
            gbar_sum,
            self.n_agents,
            self.gamma,
            self.alpha,
        );
        if !(sbar_residual <= SBAR_TOLERANCE) {
            return Err(RossError::invariant(format!(
                "auxiliary sequence identity violated at round {round}: relative residual {sbar_residual:e}"
            )));
        }
        let (ru, rx) = if self.has_momentum {
            check_mean_preservation(&self.prev, &cur, gbar_sum, self.n_agents, self.gamma, self.alpha)?
        } else {
            // the step direction of the mean is the averaged gradient itself
            let implied = MeanSnapshot {
                ubar: gbar_sum.scaled(1.0 / self.n_agents as f64),
                xbar: cur.xbar.clone(),
            };
            check_mean_preservation(&self.prev, &implied, gbar_sum, self.n_agents, self.gamma, 0.0)?
        };
        let next_prev2 = std::mem::replace(&mut self.prev, cur).xbar;
        self.xbar_prev2 = Some(next_prev2);
        Ok(DiagnosticsRow {
            round,
            sbar_residual,
            mean_resid_u: self.has_momentum.then_some(ru),
            mean_resid_x: rx,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(alpha: f64, rho: f64, omega_min: f64) -> ConvergenceDiagnostics {
        ConvergenceDiagnostics {
            smoothness: 1.0,
            sigma: 0.1,
            heterogeneity: 0.1,
            alpha,
            gamma: 0.001,
            rho,
            omega_min,
            n_agents: 4,
        }
    }

    #[test]
    fn branch_one_is_two_at_half_momentum() {
        let b = diag(0.5, 0.0, 1.0).gamma_upper_bound().unwrap();
        assert_eq!(b.branches[0], 2.0);
    }

    #[test]
    fn branch_two_value() {
        let b = diag(0.5, 0.0, 1.0).gamma_upper_bound().unwrap();
        assert!((b.branches[1] - 0.5 / (8.0 * 3f64.sqrt())).abs() < 1e-12);
        assert!((b.branches[1] - 0.036084).abs() < 1e-6);
    }

    #[test]
    fn branch_three_infeasible_for_small_omega() {
        let b = diag(0.5, 0.0, 0.1).gamma_upper_bound().unwrap();
        assert!(!b.feasible[2]);
        assert!(b.branches[2].is_nan());
        assert_eq!(b.bound, Some(b.branches[0].min(b.branches[1])));
    }

    #[test]
    fn branch_three_is_infeasible_everywhere_in_range() {
        // (1-a)^4 < 1 while 8 L^2 a (12 + 64/w^4)^2 >= 8 * 76^2 * a > 1 for w <= 1
        for a in [1e-3, 0.1, 0.5, 0.9] {
            let b = diag(a, 0.2, 1.0).gamma_upper_bound().unwrap();
            assert!(!b.feasible[2]);
        }
    }

    #[test]
    fn bound_rejects_out_of_range() {
        for d in [diag(0.0, 0.0, 1.0), diag(1.0, 0.0, 1.0), diag(0.5, 1.0, 1.0), diag(0.5, 0.0, 0.0), diag(0.5, 0.0, 1.5)] {
            assert_eq!(d.gamma_upper_bound().unwrap_err().exit_code(), 1);
        }
    }

    #[test]
    fn admits_compares_against_minimum() {
        let b = diag(0.5, 0.0, 1.0).gamma_upper_bound().unwrap();
        assert!(b.admits(0.03));
        assert!(!b.admits(0.04));
    }

    #[test]
    fn constants_by_hand() {
        // a = 0.5, L = 1, gamma = 0.01
        let d = ConvergenceDiagnostics { gamma: 0.01, ..diag(0.5, 0.0, 1.0) };
        let c = d.constants().unwrap();
        let m1 = 0.01 - 0.5 * 1e-4;
        assert!((c.m1 - m1).abs() < 1e-15);
        assert!((c.m2 - (2e-4 + 2e-4) / m1).abs() < 1e-12);
        assert!((c.m3 - 0.5 / m1).abs() < 1e-9);
        assert!((c.m4 - 2.0 / m1).abs() < 1e-9);
        assert!((c.m5 - 0.01 / m1).abs() < 1e-12);
    }

    #[test]
    fn gradient_bound_needs_positive_m1() {
        let big = ConvergenceDiagnostics { gamma: 10.0, ..diag(0.5, 0.0, 1.0) };
        assert!(big.constants().unwrap().m1 < 0.0);
        assert!(big.gradient_bound(10, 1.0).is_err());
        let ok = diag(0.5, 0.1, 0.5);
        let b10 = ok.gradient_bound(10, 1.0).unwrap();
        let b100 = ok.gradient_bound(100, 1.0).unwrap();
        assert!(b100 < b10 && b100 > 0.0);
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn first_step_is_scaled_mean_step() {
        let (x0, x1) = (pv(&[1.0, 2.0]), pv(&[0.5, 2.5]));
        let a = 0.3;
        let s1 = sbar(&x1, Some(&x0), a);
        for k in 0..2 {
            let lhs = s1.values[k] - x0.values[k];
            assert!((lhs - (x1.values[k] - x0.values[k]) / (1.0 - a)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_momentum_reduces_to_mean_step() {
        let (x0, x1, x2) = (pv(&[1.0]), pv(&[0.8]), pv(&[0.5]));
        assert_eq!(sbar(&x2, Some(&x1), 0.0), x2);
        let sums = [pv(&[32.0]), pv(&[48.0])];
        // gamma = 0.025, N = 4: steps of 0.2 and 0.3
        let r = check_sbar_identity(&[x0, x1, x2], &sums, 4, 0.025, 0.0).unwrap();
        assert!(r < 1e-15);
    }

    #[test]
    fn sbar_check_on_synthetic_momentum_run() {
        let (gamma, alpha, n) = (0.1, 0.6, 3);
        let mut x = pv(&[0.3, -1.0]);
        let mut u = pv(&[0.0, 0.0]);
        let mut xs = vec![x.clone()];
        let mut sums = vec![];
        for t in 0..12 {
            let g = pv(&[(t as f64).sin(), (t as f64 * 0.7).cos()]);
            let sum = g.scaled(n as f64);
            u = u.scaled(alpha);
            u.axpy(1.0, &g);
            x = x.minus_scaled(gamma, &u);
            xs.push(x.clone());
            sums.push(sum);
        }
        assert!(check_sbar_identity(&xs, &sums, n, gamma, alpha).unwrap() < 1e-14);
        sums[5].values[0] += 1e-3;
        assert_eq!(check_sbar_identity(&xs, &sums, n, gamma, alpha).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn sbar_check_needs_two_rounds() {
        assert!(check_sbar_identity(&[pv(&[1.0])], &[], 1, 0.1, 0.5).is_err());
    }

    #[test]
    fn single_agent_means_are_exact() {
        let (gamma, alpha) = (0.05, 0.5);
        let g = pv(&[1.0, -3.0]);
        let prev = MeanSnapshot { ubar: pv(&[0.2, 0.1]), xbar: pv(&[1.0, 1.0]) };
        let mut u = prev.ubar.scaled(alpha);
        u.axpy(1.0, &g);
        let cur = MeanSnapshot { xbar: prev.xbar.minus_scaled(gamma, &u), ubar: u };
        let (ru, rx) = check_mean_preservation(&prev, &cur, &g, 1, gamma, alpha).unwrap();
        assert_eq!((ru, rx), (0.0, 0.0));
    }
}
