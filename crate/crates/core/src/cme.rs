//! Empirical conditional mean embedding of the transition kernel.
//!
//! Given transitions `(s_i, a_i, s_i+)`, the conditional expectation of a
//! function `f` of the successor state is estimated as
//! `k_SA(s, a)^T (K_SA + lambda N I)^{-1} f(S+)`. The finite-sample radius of
//! the ambiguity ball around this estimate is provided by [`epsilon_bound`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::agent::buffer::{concat, Transition};
use crate::error::{check_dim, KbseError, Result};
use crate::kernel::{factorize, gram_matrix, rbf, GramFactor, KernelSpec};

/// Fitted embedding: training pairs, successors and the factorized Gram.
#[derive(Debug, Clone)]
pub struct CmeModel {
    inputs: Vec<Vec<f64>>,
    successors: Vec<Vec<f64>>,
    state_dim: usize,
    action_dim: usize,
    factor: GramFactor,
    kernel: KernelSpec,
}

/// Fits the embedding on an iid sample of transitions.
pub fn fit_cme(sample: &[Transition], kernel: &KernelSpec) -> Result<CmeModel> {
    kernel.validate()?;
    let first = sample
        .first()
        .ok_or_else(|| KbseError::InvalidArgument("fit_cme needs at least one transition".into()))?;
    let (state_dim, action_dim) = (first.s.len(), first.a.len());
    for t in sample {
        check_dim(state_dim, t.s.len())?;
        check_dim(action_dim, t.a.len())?;
        check_dim(state_dim, t.s_plus.len())?;
    }
    let inputs: Vec<Vec<f64>> = sample.iter().map(Transition::state_action).collect();
    let successors = sample.iter().map(|t| t.s_plus.clone()).collect();
    let gram = gram_matrix(&inputs, kernel.bandwidth_state_action)?;
    let factor = factorize(&gram, kernel.regularization_lambda, sample.len())?;
    Ok(CmeModel { inputs, successors, state_dim, action_dim, factor, kernel: *kernel })
}

impl CmeModel {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn successors(&self) -> &[Vec<f64>] {
        &self.successors
    }

    pub fn factor(&self) -> &GramFactor {
        &self.factor
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    fn query_vector(&self, s: &[f64], a: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.state_dim, s.len())?;
        check_dim(self.action_dim, a.len())?;
        let x = concat(s, a);
        let bw = self.kernel.bandwidth_state_action;
        Ok(DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|p| rbf(&x, p, bw)),
        ))
    }

    /// `W(s, a) = (K_SA + lambda N I)^{-1} k_SA(s, a)`.
    pub fn cme_weights(&self, s: &[f64], a: &[f64]) -> Result<DVector<f64>> {
        let k = self.query_vector(s, a)?;
        self.factor.solve(&k)
    }

    /// Estimate of `E[f(s+) | s, a]` from `f` evaluated on the stored successors.
    pub fn expected_value(&self, f_on_successors: &[f64], s: &[f64], a: &[f64]) -> Result<f64> {
        check_dim(self.len(), f_on_successors.len())?;
        let w = self.cme_weights(s, a)?;
        Ok(w.iter().zip(f_on_successors).map(|(wi, fi)| wi * fi).sum())
    }

    /// Pre-solves `(K_SA + lambda N I)^{-1} f(S+)` so repeated conditional
    /// expectations of the same function cost one kernel vector each.
    pub fn embed(&self, f_on_successors: &[f64]) -> Result<EmbeddedFunction<'_>> {
        check_dim(self.len(), f_on_successors.len())?;
        let coeffs = self.factor.solve(&DVector::from_column_slice(f_on_successors))?;
        Ok(EmbeddedFunction { model: self, coeffs })
    }

    /// `k_SA((s, a), (s, a))`, which is 1 for the RBF kernel.
    pub fn self_similarity(&self, s: &[f64], a: &[f64]) -> f64 {
        let x = concat(s, a);
        rbf(&x, &x, self.kernel.bandwidth_state_action)
    }
}

/// A function of the successor state whose embedding coefficients are cached.
#[derive(Debug, Clone)]
pub struct EmbeddedFunction<'a> {
    model: &'a CmeModel,
    coeffs: DVector<f64>,
}

impl EmbeddedFunction<'_> {
    pub fn expected_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.model.query_vector(s, a)?.dot(&self.coeffs))
    }
}

/// Radius of the MMD ambiguity ball together with the data it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdBounds {
    pub epsilon: f64,
    pub zeta: f64,
    pub sample_count: usize,
    pub kernel_bound_c: f64,
}

impl MmdBounds {
    pub fn new(sample_count: usize, kernel_bound_c: f64, zeta: f64) -> Result<Self> {
        Ok(Self {
            epsilon: epsilon_bound(sample_count, kernel_bound_c, zeta)?,
            zeta,
            sample_count,
            kernel_bound_c,
        })
    }
}

/// MMD radius `sqrt(C/n) (1 + sqrt(2 ln(1/zeta)))` holding with probability `1 - zeta`.
pub fn epsilon_bound(n: usize, c: f64, zeta: f64) -> Result<f64> {
    if n == 0 {
        return Err(KbseError::InvalidArgument("epsilon_bound needs n >= 1".into()));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(KbseError::InvalidArgument(format!("zeta must lie in (0, 1), got {zeta}")));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(KbseError::InvalidArgument(format!("kernel bound C must be positive, got {c}")));
    }
    Ok((c / n as f64).sqrt() * (1.0 + (2.0 * (1.0 / zeta).ln()).sqrt()))
}

/// Confidence level `exp(-(eps sqrt(n/C) - 1)^2 / 2)` achieved by radius `epsilon`.
///
/// Returns 1 when `eps sqrt(n/C) <= 1` (no guarantee) and never returns 0:
/// underflow is reported as the smallest positive double.
pub fn zeta_bound(epsilon: f64, n: usize, c: f64) -> f64 {
    let scaled = epsilon * (n as f64 / c).sqrt();
    if !(scaled > 1.0) {
        return 1.0;
    }
    (-0.5 * (scaled - 1.0).powi(2)).exp().clamp(f64::MIN_POSITIVE, 1.0)
}
