//! Runtime action shield.
//!
//! A strictly linear model `s+ = P s + Q a` is fitted to the most recent
//! transitions. When shielding, the barrier is linearised at the nominal
//! successor and the action is projected onto
//! `{a' in box : g^T Q (a' - a) <= nu (1 - margin) - B(s_hat)}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::buffer::Transition;
use crate::barrier::{eval_barrier, BarrierModel};
use crate::error::{check_dim, KbseError, Result};
use crate::space::BoxBounds;

pub const DEFAULT_WINDOW_H: usize = 500;
pub const DEFAULT_MARGIN: f64 = 0.05;

/// Below this norm of `Q^T grad B` the linearised constraint is treated as degenerate.
pub const DEGENERATE_GRADIENT_NORM: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShieldConfig {
    pub window_h: usize,
    pub margin: f64,
    pub backtrack_steps: u32,
    pub fallback_samples: usize,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self { window_h: DEFAULT_WINDOW_H, margin: DEFAULT_MARGIN, backtrack_steps: 8, fallback_samples: 128 }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_h == 0 {
            return Err(KbseError::InvalidArgument("shield window_h must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(KbseError::InvalidArgument(format!("shield margin must lie in [0, 1), got {}", self.margin)));
        }
        if self.fallback_samples == 0 {
            return Err(KbseError::InvalidArgument("shield fallback_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLinearModel {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Number of transitions the model was fitted on.
    pub window_h: usize,
    /// RMS one-step prediction error on the window.
    pub residual: f64,
}

impl LocalLinearModel {
    pub fn state_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim(), s.len())?;
        check_dim(self.action_dim(), a.len())?;
        let next = &self.p * DVector::from_column_slice(s) + &self.q * DVector::from_column_slice(a);
        Ok(next.as_slice().to_vec())
    }
}

/// Least-squares fit of `s+ = P s + Q a` on the last `min(h, len)` transitions.
/// Rank-deficient problems return the minimum-norm solution.
pub fn fit_local_dynamics(recent: &[Transition], h: usize) -> Result<LocalLinearModel> {
    if recent.is_empty() || h == 0 {
        return Err(KbseError::InvalidArgument("local dynamics need a non-empty window".into()));
    }
    let window = &recent[recent.len().saturating_sub(h)..];
    let p = window[0].s.len();
    let q = window[0].a.len();
    for t in window {
        check_dim(p, t.s.len())?;
        check_dim(p, t.s_plus.len())?;
        check_dim(q, t.a.len())?;
    }
    let n = window.len();
    let x = DMatrix::from_fn(n, p + q, |i, j| if j < p { window[i].s[j] } else { window[i].a[j - p] });
    let y = DMatrix::from_fn(n, p, |i, j| window[i].s_plus[j]);
    let svd = x.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * (n.max(p + q) as f64);
    let theta = svd.solve(&y, tol).map_err(|e| KbseError::InvalidArgument(e.to_string()))?;
    let pred = &x * &theta;
    let residual = ((pred - &y).norm_squared() / n as f64).sqrt();
    let theta_t = theta.transpose();
    Ok(LocalLinearModel {
        p: theta_t.columns(0, p).into_owned(),
        q: theta_t.columns(p, q).into_owned(),
        window_h: n,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShieldOutcome {
    /// The nominal action already satisfied the margin.
    Unchanged,
    /// The linearised projection passed verification.
    Projected,
    /// Verification passed after this many doublings of the projection.
    Backtracked { steps: u32 },
    /// Best of the uniformly sampled box actions.
    Fallback { degenerate_gradient: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShieldDecision {
    pub action: Vec<f64>,
    pub outcome: ShieldOutcome,
    /// Barrier at the predicted successor of the returned action.
    pub predicted_barrier: f64,
}

fn project(a: &[f64], d: &[f64], mu: f64, action_box: &BoxBounds) -> Vec<f64> {
    let moved: Vec<f64> = a.iter().zip(d).map(|(ai, di)| ai - mu * di).collect();
    action_box.clip(&moved)
}

fn lhs(a: &[f64], d: &[f64], candidate: &[f64]) -> f64 {
    d.iter().zip(candidate.iter().zip(a)).map(|(di, (ci, ai))| di * (ci - ai)).sum()
}

/// Euclidean projection of `a` onto `{x in box : d^T (x - a) <= rhs}` with
/// `rhs < 0`. The solution is `clip(a - mu d)` for the smallest `mu >= 0`
/// meeting the constraint; when no box point meets it, the box point
/// minimising `d^T x` is returned. Returns the action and its multiplier.
pub fn project_box_halfspace(a: &[f64], d: &[f64], rhs: f64, action_box: &BoxBounds) -> (Vec<f64>, f64) {
    let dd: f64 = d.iter().map(|v| v * v).sum();
    if rhs >= 0.0 || dd == 0.0 {
        return (action_box.clip(a), 0.0);
    }
    let mut hi = -rhs / dd;
    // Beyond this multiplier every coordinate with d_i != 0 sits on a bound.
    let width: f64 = action_box.low.iter().zip(&action_box.high).map(|(l, h)| h - l).fold(0.0, f64::max);
    let saturate = d
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| (width + a.iter().map(|x| x.abs()).fold(0.0, f64::max)) / v.abs())
        .fold(0.0, f64::max);
    while lhs(a, d, &project(a, d, hi, action_box)) > rhs {
        if hi > saturate {
            return (project(a, d, hi, action_box), hi);
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lhs(a, d, &project(a, d, mid, action_box)) > rhs {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    (project(a, d, hi, action_box), hi)
}

/// Returns the action closest to `a` whose predicted successor keeps the
/// barrier below `nu`, following the procedure in the module docs.
/// The returned action always lies in `action_box`.
#[allow(clippy::too_many_arguments)]
pub fn safe_action<R: Rng + ?Sized>(
    barrier: &BarrierModel,
    dynamics: &LocalLinearModel,
    s: &[f64],
    a: &[f64],
    action_box: &BoxBounds,
    config: &ShieldConfig,
    rng: &mut R,
) -> Result<ShieldDecision> {
    check_dim(action_box.dim(), a.len())?;
    check_dim(dynamics.action_dim(), a.len())?;
    if !(barrier.nu > 0.0) {
        return Err(KbseError::InvalidBarrier { eta: barrier.eta, nu: barrier.nu });
    }
    let nu = barrier.nu;
    let target = nu * (1.0 - config.margin);
    let predicted = |act: &[f64]| -> Result<f64> { eval_barrier(barrier, &dynamics.predict(s, act)?) };

    let s_hat = dynamics.predict(s, a)?;
    let b0 = eval_barrier(barrier, &s_hat)?;
    if b0 <= target {
        return Ok(ShieldDecision { action: a.to_vec(), outcome: ShieldOutcome::Unchanged, predicted_barrier: b0 });
    }

    let g = DVector::from_vec(barrier.gradient(&s_hat)?);
    let d_vec = dynamics.q.transpose() * g;
    let d = d_vec.as_slice();
    let degenerate = d_vec.norm() < DEGENERATE_GRADIENT_NORM;
    if !degenerate {
        let (projected, mu) = project_box_halfspace(a, d, target - b0, action_box);
        let b1 = predicted(&projected)?;
        if b1 <= nu {
            return Ok(ShieldDecision { action: projected, outcome: ShieldOutcome::Projected, predicted_barrier: b1 });
        }
        let mut scale = mu;
        for step in 1..=config.backtrack_steps {
            scale *= 2.0;
            let candidate = project(a, d, scale, action_box);
            let b = predicted(&candidate)?;
            if b <= nu {
                return Ok(ShieldDecision {
                    action: candidate,
                    outcome: ShieldOutcome::Backtracked { steps: step },
                    predicted_barrier: b,
                });
            }
        }
    } else {
        log::debug!("shield: degenerate barrier gradient through Q, sampling fallback");
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..config.fallback_samples {
        let candidate = action_box.sample(rng);
        let b = predicted(&candidate)?;
        if best.as_ref().map_or(true, |(_, bb)| b < *bb) {
            best = Some((candidate, b));
        }
    }
    let (action, predicted_barrier) = best.expect("at least one fallback sample");
    Ok(ShieldDecision {
        action,
        outcome: ShieldOutcome::Fallback { degenerate_gradient: degenerate },
        predicted_barrier,
    })
}
