//! Kernel barrier functions: fitting, level constants, the robust decrease
//! constant and the resulting reach-probability certificate.
//!
//! The barrier is the kernel expansion `B(s) = sum_i alpha_i k_S(s, s_i)`
//! fitted by ridge regression to binary labels (1 on unsafe states). With
//! `eta = max B` over initial states, `nu = min B` over unsafe states and a
//! decrease slack `c`, the probability of entering the unsafe set within `T`
//! steps is at most `(eta + c T) / nu`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::buffer::Transition;
use crate::cme::{fit_cme, CmeModel};
use crate::error::{check_dim, KbseError, Result};
use crate::kernel::{factorize_shifted, gram_matrix, rbf, rkhs_norm, KernelSpec};

pub const BARRIER_FORMAT_VERSION: u32 = 1;

/// Tolerance on the evaluated barrier's non-negativity.
pub const NONNEGATIVITY_TOLERANCE: f64 = 1e-6;

/// Maximum number of fitting attempts in [`compute_bc`].
pub const MAX_ATTEMPTS: usize = 5;

/// A scalar read off the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feature {
    Coordinate { index: usize },
    /// `atan2(s[sin_index], s[cos_index])`, for angles observed as (cos, sin).
    Angle { cos_index: usize, sin_index: usize },
}

impl Feature {
    pub fn value(&self, s: &[f64]) -> f64 {
        match *self {
            Feature::Coordinate { index } => s[index],
            Feature::Angle { cos_index, sin_index } => s[sin_index].atan2(s[cos_index]),
        }
    }

    fn set(&self, s: &mut [f64], v: f64) {
        match *self {
            Feature::Coordinate { index } => s[index] = v,
            Feature::Angle { cos_index, sin_index } => {
                s[cos_index] = v.cos();
                s[sin_index] = v.sin();
            }
        }
    }

    fn max_index(&self) -> usize {
        match *self {
            Feature::Coordinate { index } => index,
            Feature::Angle { cos_index, sin_index } => cos_index.max(sin_index),
        }
    }
}

/// A safety constraint. States on the boundary count as safe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Constraint {
    /// Safe iff `feature >= bound`.
    Greater { feature: Feature, bound: f64 },
    /// Safe iff `|feature| <= bound`.
    AbsLess { feature: Feature, bound: f64 },
}

/// Offset used to place boundary samples strictly inside the unsafe set.
const BOUNDARY_OFFSET: f64 = 1e-6;

impl Constraint {
    pub fn violated(&self, s: &[f64]) -> bool {
        match *self {
            Constraint::Greater { feature, bound } => feature.value(s) < bound,
            Constraint::AbsLess { feature, bound } => feature.value(s).abs() > bound,
        }
    }

    fn feature(&self) -> Feature {
        match *self {
            Constraint::Greater { feature, .. } | Constraint::AbsLess { feature, .. } => feature,
        }
    }

    /// Moves `s` onto the unsafe side of this constraint's boundary.
    fn place_on_boundary<R: Rng + ?Sized>(&self, s: &mut [f64], rng: &mut R) {
        match *self {
            Constraint::Greater { feature, bound } => feature.set(s, bound - BOUNDARY_OFFSET),
            Constraint::AbsLess { feature, bound } => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                feature.set(s, sign * (bound + BOUNDARY_OFFSET));
            }
        }
    }
}

/// Unsafe set and horizon `<S_u, T>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub constraints: Vec<Constraint>,
    pub horizon_t: usize,
}

impl SafetySpec {
    pub fn new(constraints: Vec<Constraint>, horizon_t: usize) -> Result<Self> {
        if horizon_t == 0 {
            return Err(KbseError::InvalidArgument("safety horizon must be positive".into()));
        }
        Ok(Self { constraints, horizon_t })
    }

    /// A state is unsafe iff at least one constraint is violated.
    pub fn is_unsafe(&self, s: &[f64]) -> bool {
        self.constraints.iter().any(|c| c.violated(s))
    }

    /// Binary labels, `true` for unsafe.
    pub fn labels(&self, states: &[Vec<f64>]) -> Vec<bool> {
        states.iter().map(|s| self.is_unsafe(s)).collect()
    }

    /// Smallest state dimension the constraints can be evaluated on.
    pub fn min_state_dim(&self) -> usize {
        self.constraints.iter().map(|c| c.feature().max_index() + 1).max().unwrap_or(0)
    }

    /// Projects `base` onto the boundary of a uniformly chosen constraint, on
    /// its unsafe side. Returns `None` when there are no constraints.
    pub fn boundary_sample<R: Rng + ?Sized>(&self, base: &[f64], rng: &mut R) -> Option<Vec<f64>> {
        if self.constraints.is_empty() {
            return None;
        }
        let c = self.constraints[rng.random_range(0..self.constraints.len())];
        let mut s = base.to_vec();
        c.place_on_boundary(&mut s, rng);
        Some(s)
    }
}

/// A fitted barrier and the constants certifying it.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierModel {
    pub bandwidth: f64,
    pub ridge_lambda: f64,
    pub centers: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub eta: f64,
    pub nu: f64,
    /// Decrease slack under the executed policy (max over candidate states).
    pub c: f64,
    /// Min over states of max over actions of the robust decrease expression.
    pub c_minmax: f64,
    pub b_bar: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub horizon_t: usize,
    pub delta: f64,
    pub valid: bool,
    /// Smallest un-clamped barrier value seen on the evaluation samples.
    pub min_raw: f64,
}

impl BarrierModel {
    /// An expansion without certificate constants; `valid` is false until
    /// levels and slack have been computed.
    pub fn from_expansion(centers: Vec<Vec<f64>>, alpha: Vec<f64>, bandwidth: f64) -> Result<Self> {
        check_dim(centers.len(), alpha.len())?;
        if let Some(first) = centers.first() {
            for c in &centers {
                check_dim(first.len(), c.len())?;
            }
        }
        if !(bandwidth > 0.0) {
            return Err(KbseError::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self {
            bandwidth,
            ridge_lambda: 0.0,
            centers,
            alpha,
            eta: 0.0,
            nu: 0.0,
            c: 0.0,
            c_minmax: 0.0,
            b_bar: 0.0,
            epsilon: 0.0,
            zeta: 0.0,
            horizon_t: 1,
            delta: 1.0,
            valid: false,
            min_raw: 0.0,
        })
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.centers.first().map(Vec::len)
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if let Some(d) = self.state_dim() {
            check_dim(d, s.len())?;
        }
        Ok(())
    }

    /// Un-clamped kernel expansion.
    pub fn raw(&self, s: &[f64]) -> Result<f64> {
        self.check_state(s)?;
        Ok(self.raw_unchecked(s))
    }

    pub(crate) fn raw_unchecked(&self, s: &[f64]) -> f64 {
        self.centers
            .iter()
            .zip(&self.alpha)
            .map(|(c, a)| a * rbf(s, c, self.bandwidth))
            .sum()
    }

    /// Gradient of the un-clamped expansion.
    pub fn gradient(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let inv_bw2 = 1.0 / (self.bandwidth * self.bandwidth);
        let mut g = vec![0.0; s.len()];
        for (c, a) in self.centers.iter().zip(&self.alpha) {
            let w = a * rbf(s, c, self.bandwidth) * inv_bw2;
            for (gi, (ci, si)) in g.iter_mut().zip(c.iter().zip(s)) {
                *gi += w * (ci - si);
            }
        }
        Ok(g)
    }

    /// RKHS norm of the expansion over its own centers.
    pub fn rkhs_norm(&self) -> Result<f64> {
        if self.centers.is_empty() {
            return Ok(0.0);
        }
        let gram = gram_matrix(&self.centers, self.bandwidth)?;
        rkhs_norm(&DVector::from_column_slice(&self.alpha), &gram)
    }

    pub fn certificate(&self) -> Certificate {
        Certificate::from_model(self)
    }

    pub fn to_document(&self) -> BarrierDocument {
        BarrierDocument {
            version: BARRIER_FORMAT_VERSION,
            kernel: BarrierKernel { bandwidth: self.bandwidth, lambda: self.ridge_lambda },
            centers: self.centers.clone(),
            alpha: self.alpha.clone(),
            eta: self.eta,
            nu: self.nu,
            c: self.c,
            c_minmax: self.c_minmax,
            b_bar: self.b_bar,
            epsilon: self.epsilon,
            zeta: self.zeta,
            horizon_t: self.horizon_t,
            delta: self.delta,
            valid: self.valid,
            min_raw: self.min_raw,
        }
    }

    pub fn from_document(doc: BarrierDocument) -> Result<Self> {
        let field_err = |field: &str, reason: &str| KbseError::Checkpoint { field: field.into(), reason: reason.into() };
        if doc.version != BARRIER_FORMAT_VERSION {
            return Err(field_err("version", &format!("unsupported version {}", doc.version)));
        }
        if !(doc.kernel.bandwidth > 0.0) {
            return Err(field_err("kernel.bandwidth", "must be positive"));
        }
        if doc.centers.len() != doc.alpha.len() {
            return Err(field_err("alpha", "length differs from centers"));
        }
        if let Some(first) = doc.centers.first() {
            if doc.centers.iter().any(|c| c.len() != first.len()) {
                return Err(field_err("centers", "ragged center dimensions"));
            }
        }
        if doc.centers.iter().flatten().chain(&doc.alpha).any(|v| !v.is_finite()) {
            return Err(field_err("centers", "non-finite value"));
        }
        if doc.horizon_t == 0 {
            return Err(field_err("horizon_T", "must be positive"));
        }
        Ok(Self {
            bandwidth: doc.kernel.bandwidth,
            ridge_lambda: doc.kernel.lambda,
            centers: doc.centers,
            alpha: doc.alpha,
            eta: doc.eta,
            nu: doc.nu,
            c: doc.c,
            c_minmax: doc.c_minmax,
            b_bar: doc.b_bar,
            epsilon: doc.epsilon,
            zeta: doc.zeta,
            horizon_t: doc.horizon_t,
            delta: doc.delta,
            valid: doc.valid,
            min_raw: doc.min_raw,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BarrierDocument = serde_json::from_str(text).map_err(|e| KbseError::Checkpoint {
            field: "barrier".into(),
            reason: e.to_string(),
        })?;
        Self::from_document(doc)
    }
}

/// On-disk barrier format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierDocument {
    pub version: u32,
    pub kernel: BarrierKernel,
    pub centers: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub eta: f64,
    pub nu: f64,
    pub c: f64,
    #[serde(default)]
    pub c_minmax: f64,
    pub b_bar: f64,
    pub epsilon: f64,
    pub zeta: f64,
    #[serde(rename = "horizon_T")]
    pub horizon_t: usize,
    pub delta: f64,
    pub valid: bool,
    #[serde(default)]
    pub min_raw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierKernel {
    pub bandwidth: f64,
    pub lambda: f64,
}

/// Ridge fit of the barrier weights to binary labels (`true` = unsafe = 1).
///
/// Solves `(K^T K + ridge_lambda I) alpha = K^T Y` with `K` the state Gram of
/// the sample; the sample states become the expansion centers.
pub fn fit_barrier(
    sample: &[Vec<f64>],
    labels: &[bool],
    kernel: &KernelSpec,
    ridge_lambda: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if sample.is_empty() {
        return Err(KbseError::InvalidArgument("fit_barrier needs a non-empty sample".into()));
    }
    check_dim(sample.len(), labels.len())?;
    if !(ridge_lambda > 0.0) {
        return Err(KbseError::InvalidArgument(format!("ridge_lambda must be positive, got {ridge_lambda}")));
    }
    if !labels.iter().any(|&l| l) {
        return Err(KbseError::NoUnsafeSamples);
    }
    if labels.iter().all(|&l| l) {
        return Err(KbseError::NoSafeSamples);
    }
    let gram = gram_matrix(sample, kernel.bandwidth_state)?;
    let y = DVector::from_iterator(labels.len(), labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let normal: DMatrix<f64> = gram.transpose() * &gram;
    let (chol, jitter) = factorize_shifted(&normal, ridge_lambda)?;
    if jitter > 0.0 {
        log::debug!("barrier ridge solve needed jitter {jitter:e}");
    }
    let alpha = chol.solve(&(gram.transpose() * y));
    Ok((sample.to_vec(), alpha.iter().copied().collect()))
}

/// Evaluates the barrier, clamped at zero.
pub fn eval_barrier(model: &BarrierModel, s: &[f64]) -> Result<f64> {
    Ok(model.raw(s)?.max(0.0))
}

/// `eta = max B` over initial states, `nu = min B` over unsafe samples.
pub fn compute_levels(model: &BarrierModel, initial_states: &[Vec<f64>], unsafe_samples: &[Vec<f64>]) -> Result<(f64, f64)> {
    if unsafe_samples.is_empty() {
        return Err(KbseError::NoUnsafeSamples);
    }
    if initial_states.is_empty() {
        return Err(KbseError::InvalidArgument("compute_levels needs at least one initial state".into()));
    }
    let mut eta = f64::NEG_INFINITY;
    for s in initial_states {
        eta = eta.max(eval_barrier(model, s)?);
    }
    let mut nu = f64::INFINITY;
    for s in unsafe_samples {
        nu = nu.min(eval_barrier(model, s)?);
    }
    Ok((eta, nu))
}

/// Decrease constants on a finite candidate grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecreaseConstants {
    /// `max_s [expr(s, policy(s))]`, clamped at zero.
    pub c: f64,
    /// `min_s max_a expr(s, a)` over the candidate grid plus the policy action, un-clamped.
    pub c_minmax: f64,
}

/// Robust decrease expression
/// `W(s,a)^T B(S+) - B(s) + epsilon sqrt(k_SA((s,a),(s,a))) b_bar`
/// evaluated with the un-clamped expansion, using `model.epsilon` and `model.b_bar`.
pub fn decrease_expression(model: &BarrierModel, cme: &CmeModel, s: &[f64], a: &[f64]) -> Result<f64> {
    let b_next: Vec<f64> = cme.successors().iter().map(|sp| model.raw_unchecked(sp)).collect();
    let expected = cme.expected_value(&b_next, s, a)?;
    Ok(expected - model.raw(s)? + model.epsilon * cme.self_similarity(s, a).sqrt() * model.b_bar)
}

/// Computes the decrease slack over `candidate_states` x (`candidate_actions` + policy action).
pub fn compute_c(
    model: &BarrierModel,
    cme: &CmeModel,
    candidate_states: &[Vec<f64>],
    candidate_actions: &[Vec<f64>],
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<DecreaseConstants> {
    if candidate_states.is_empty() || candidate_actions.is_empty() {
        return Err(KbseError::InvalidArgument("compute_c needs non-empty candidate sets".into()));
    }
    let b_next: Vec<f64> = cme.successors().iter().map(|sp| model.raw_unchecked(sp)).collect();
    let embedded = cme.embed(&b_next)?;
    let expr = |s: &[f64], b_s: f64, a: &[f64]| -> Result<f64> {
        let penalty = model.epsilon * cme.self_similarity(s, a).sqrt() * model.b_bar;
        Ok(embedded.expected_value(s, a)? - b_s + penalty)
    };
    let mut c_policy = f64::NEG_INFINITY;
    let mut c_minmax = f64::INFINITY;
    for s in candidate_states {
        let b_s = model.raw(s)?;
        let pa = policy(s);
        let at_policy = expr(s, b_s, &pa)?;
        c_policy = c_policy.max(at_policy);
        let mut worst = at_policy;
        for a in candidate_actions {
            worst = worst.max(expr(s, b_s, a)?);
        }
        c_minmax = c_minmax.min(worst);
    }
    Ok(DecreaseConstants { c: c_policy.max(0.0), c_minmax })
}

/// Certified bound `min(1, (eta + c T) / nu)` on the T-step unsafe-reach probability.
pub fn certify(model: &BarrierModel) -> Result<f64> {
    certify_values(model.eta, model.nu, model.c, model.horizon_t)
}

pub fn certify_values(eta: f64, nu: f64, c: f64, horizon_t: usize) -> Result<f64> {
    if !(nu > eta) || !(nu > 0.0) || !(eta >= 0.0) {
        return Err(KbseError::InvalidBarrier { eta, nu });
    }
    if !(c >= 0.0) {
        return Err(KbseError::InvalidArgument(format!("decrease slack must be non-negative, got {c}")));
    }
    Ok(((eta + c * horizon_t as f64) / nu).min(1.0))
}

/// Human-facing summary of what a barrier guarantees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub valid: bool,
    pub delta: Option<f64>,
    pub safety_probability: Option<f64>,
    pub confidence: f64,
    pub vacuous: bool,
    pub eta: f64,
    pub nu: f64,
    pub c: f64,
    pub c_minmax: f64,
    pub b_bar: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub horizon_t: usize,
}

impl Certificate {
    pub fn from_model(model: &BarrierModel) -> Self {
        let delta = if model.valid { certify(model).ok() } else { None };
        Self {
            valid: delta.is_some(),
            delta,
            safety_probability: delta.map(|d| 1.0 - d),
            confidence: 1.0 - model.zeta,
            vacuous: delta.map_or(true, |d| d >= 1.0),
            eta: model.eta,
            nu: model.nu,
            c: model.c,
            c_minmax: model.c_minmax,
            b_bar: model.b_bar,
            epsilon: model.epsilon,
            zeta: model.zeta,
            horizon_t: model.horizon_t,
        }
    }

    pub fn statement(&self) -> String {
        match self.delta {
            None => "no valid barrier: no safety guarantee".to_string(),
            Some(d) if d >= 1.0 => format!(
                "vacuous certificate: delta = 1 over horizon T = {} (no guarantee)",
                self.horizon_t
            ),
            Some(d) => format!(
                "P(reach unsafe set within T = {} steps) <= {:.6}; safety probability >= {:.6} with confidence {:.6}",
                self.horizon_t,
                d,
                1.0 - d,
                self.confidence
            ),
        }
    }
}

/// Environment-dependent inputs to [`compute_bc`].
#[derive(Debug, Clone)]
pub struct BarrierProblem {
    pub spec: SafetySpec,
    /// Samples of the initial-state distribution (for `eta`).
    pub initial_states: Vec<Vec<f64>>,
    /// Samples just inside the unsafe boundary (added to the unsafe samples for `nu`).
    pub boundary_states: Vec<Vec<f64>>,
    /// State-space samples added to the sample states when computing `c`.
    pub candidate_states: Vec<Vec<f64>>,
    pub candidate_actions: Vec<Vec<f64>>,
    pub ridge_lambda: f64,
    pub zeta: f64,
}

/// Fits the barrier and embedding on `sample` and computes every constant.
///
/// The returned model has `valid = false` when `nu <= eta`.
pub fn fit_and_validate(
    problem: &BarrierProblem,
    sample: &[Transition],
    kernel: &KernelSpec,
    ridge_lambda: f64,
    epsilon: f64,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<BarrierModel> {
    let states: Vec<Vec<f64>> = sample.iter().map(|t| t.s.clone()).collect();
    let labels = problem.spec.labels(&states);
    let (centers, alpha) = fit_barrier(&states, &labels, kernel, ridge_lambda)?;
    let mut model = BarrierModel::from_expansion(centers, alpha, kernel.bandwidth_state)?;
    model.ridge_lambda = ridge_lambda;
    model.zeta = problem.zeta;
    model.horizon_t = problem.spec.horizon_t;
    model.epsilon = epsilon;

    let unsafe_samples: Vec<Vec<f64>> = states
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| s.clone())
        .chain(problem.boundary_states.iter().cloned())
        .collect();
    let (eta, nu) = compute_levels(&model, &problem.initial_states, &unsafe_samples)?;
    model.eta = eta;
    model.nu = nu;
    model.b_bar = model.rkhs_norm()?;

    let candidates: Vec<Vec<f64>> = states.iter().chain(&problem.candidate_states).cloned().collect();
    model.min_raw = candidates
        .iter()
        .chain(&problem.initial_states)
        .chain(&unsafe_samples)
        .map(|s| model.raw_unchecked(s))
        .fold(f64::INFINITY, f64::min);

    let cme = fit_cme(sample, kernel)?;
    let dc = compute_c(&model, &cme, &candidates, &problem.candidate_actions, policy)?;
    model.c = dc.c;
    model.c_minmax = dc.c_minmax;

    // Evaluation clamps at zero, so the evaluated barrier is non-negative
    // whatever `min_raw` is; the levels are what can fail.
    match certify(&model) {
        Ok(delta) => {
            model.delta = delta;
            model.valid = true;
        }
        Err(_) => {
            model.delta = 1.0;
            model.valid = false;
        }
    }
    Ok(model)
}

/// Iteratively fits a barrier until one validates.
///
/// Attempts, in order: the given parameters; ridge constant / 10; bandwidths
/// x 0.5; bandwidths x 2; a fresh sample from `resample`. Stops at the first
/// valid model with `delta < 1` and otherwise returns the lowest-delta valid
/// model, or the last attempt (flagged invalid) when none validates.
/// Label errors on the primary sample are returned as errors.
pub fn compute_bc(
    problem: &BarrierProblem,
    sample: &[Transition],
    kernel: &KernelSpec,
    epsilon: f64,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
    resample: &mut dyn FnMut() -> Option<Vec<Transition>>,
) -> Result<BarrierModel> {
    if sample.is_empty() {
        return Err(KbseError::InvalidArgument("compute_bc needs a non-empty sample".into()));
    }
    let scaled = |f: f64| KernelSpec {
        bandwidth_state: kernel.bandwidth_state * f,
        bandwidth_state_action: kernel.bandwidth_state_action * f,
        ..*kernel
    };
    let mut best: Option<BarrierModel> = None;
    let mut last: Option<BarrierModel> = None;
    let mut last_err: Option<KbseError> = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let result = match attempt {
            1 => fit_and_validate(problem, sample, kernel, problem.ridge_lambda, epsilon, policy),
            2 => fit_and_validate(problem, sample, kernel, problem.ridge_lambda / 10.0, epsilon, policy),
            3 => fit_and_validate(problem, sample, &scaled(0.5), problem.ridge_lambda, epsilon, policy),
            4 => fit_and_validate(problem, sample, &scaled(2.0), problem.ridge_lambda, epsilon, policy),
            _ => match resample() {
                Some(fresh) if !fresh.is_empty() => {
                    fit_and_validate(problem, &fresh, kernel, problem.ridge_lambda, epsilon, policy)
                }
                _ => continue,
            },
        };
        let model = match result {
            Ok(m) => m,
            Err(e @ (KbseError::NoUnsafeSamples | KbseError::NoSafeSamples)) if attempt == 1 => return Err(e),
            Err(e) => {
                log::debug!("barrier attempt {attempt} failed: {e}");
                last_err = Some(e);
                continue;
            }
        };
        log::debug!(
            "barrier attempt {attempt}: eta={:.4} nu={:.4} c={:.4e} c_minmax={:.4e} b_bar={:.3} delta={:.4} valid={}",
            model.eta, model.nu, model.c, model.c_minmax, model.b_bar, model.delta, model.valid
        );
        if model.valid {
            if model.delta < 1.0 {
                return Ok(model);
            }
            if best.as_ref().map_or(true, |b| model.delta < b.delta) {
                best = Some(model.clone());
            }
        }
        last = Some(model);
    }
    match (best, last, last_err) {
        (Some(b), _, _) => Ok(b),
        (None, Some(l), _) => Ok(l),
        (None, None, Some(e)) => Err(e),
        (None, None, None) => Err(KbseError::InvalidArgument("no barrier attempt could run".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kernel(bw: f64) -> KernelSpec {
        KernelSpec::new(bw, bw, 0.0).unwrap()
    }

    fn line_spec() -> SafetySpec {
        SafetySpec::new(
            vec![Constraint::Greater { feature: Feature::Coordinate { index: 0 }, bound: -0.8 }],
            200,
        )
        .unwrap()
    }

    #[test]
    fn spec_boundary_is_safe() {
        let spec = line_spec();
        assert!(!spec.is_unsafe(&[-0.8]));
        assert!(spec.is_unsafe(&[-0.9]));
        let abs = SafetySpec::new(
            vec![Constraint::AbsLess { feature: Feature::Coordinate { index: 1 }, bound: 0.3 }],
            10,
        )
        .unwrap();
        assert!(!abs.is_unsafe(&[9.0, 0.3]));
        assert!(!abs.is_unsafe(&[9.0, -0.3]));
        assert!(abs.is_unsafe(&[0.0, -0.31]));
        assert_eq!(abs.min_state_dim(), 2);
    }

    #[test]
    fn angle_feature_and_boundary_samples() {
        let spec = SafetySpec::new(
            vec![Constraint::Greater { feature: Feature::Angle { cos_index: 0, sin_index: 1 }, bound: -0.8 }],
            200,
        )
        .unwrap();
        let th: f64 = -0.9;
        assert!(spec.is_unsafe(&[th.cos(), th.sin(), 0.0]));
        assert!(!spec.is_unsafe(&[1.0, 0.0, 3.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = spec.boundary_sample(&[1.0, 0.0, 2.0], &mut rng).unwrap();
            assert!(spec.is_unsafe(&s));
            assert!((s[1].atan2(s[0]) + 0.8).abs() < 1e-5);
            assert_eq!(s[2], 2.0);
        }
    }

    #[test]
    fn fit_requires_both_labels() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            fit_barrier(&pts, &[false, false], &kernel(1.0), 1e-6),
            Err(KbseError::NoUnsafeSamples)
        ));
        assert!(matches!(
            fit_barrier(&pts, &[true, true], &kernel(1.0), 1e-6),
            Err(KbseError::NoSafeSamples)
        ));
    }

    #[test]
    fn two_center_closed_form() {
        // Centers 20 bandwidths apart: K = I, alpha = Y / (1 + lambda).
        let pts = vec![vec![0.0], vec![20.0]];
        let (centers, alpha) = fit_barrier(&pts, &[false, true], &kernel(1.0), 1e-6).unwrap();
        let m = BarrierModel::from_expansion(centers, alpha, 1.0).unwrap();
        let unsafe_b = eval_barrier(&m, &[20.0]).unwrap();
        let safe_b = eval_barrier(&m, &[0.0]).unwrap();
        assert!((0.99..=1.0).contains(&unsafe_b), "{unsafe_b}");
        assert!((0.0..=0.01).contains(&safe_b), "{safe_b}");
        assert!((unsafe_b - 1.0 / (1.0 + 1e-6)).abs() < 1e-12);

        let (eta, nu) = compute_levels(&m, &[vec![0.0]], &[vec![20.0]]).unwrap();
        assert!(eta < 1e-9 && (nu - 1.0).abs() < 1e-5);
    }

    #[test]
    fn heavy_shrinkage() {
        let pts = vec![vec![0.0], vec![0.5], vec![3.0]];
        let (_, alpha) = fit_barrier(&pts, &[false, false, true], &kernel(1.0), 1e6).unwrap();
        assert!(alpha.iter().all(|a| a.abs() < 1e-3));
    }

    #[test]
    fn eval_matches_direct_sum_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let alpha: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = BarrierModel::from_expansion(centers.clone(), alpha.clone(), 0.7).unwrap();
        for _ in 0..100 {
            let s = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let mut direct = 0.0;
            for (c, a) in centers.iter().zip(&alpha) {
                let d2 = (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2);
                direct += a * (-d2 / (2.0 * 0.49)).exp();
            }
            assert!((m.raw(&s).unwrap() - direct).abs() < 1e-12);
            assert!((eval_barrier(&m, &s).unwrap() - direct.max(0.0)).abs() < 1e-12);
        }
        assert!(eval_barrier(&m, &[0.0]).is_err());
    }

    #[test]
    fn zero_alpha_and_isolated_center() {
        let m = BarrierModel::from_expansion(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(eval_barrier(&m, &[0.3]).unwrap(), 0.0);
        assert_eq!(m.rkhs_norm().unwrap(), 0.0);
        let m = BarrierModel::from_expansion(vec![vec![0.0], vec![50.0]], vec![0.7, 0.2], 1.0).unwrap();
        assert!((eval_barrier(&m, &[0.0]).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = BarrierModel::from_expansion(
            vec![vec![0.0, 1.0], vec![1.0, -0.5], vec![-0.3, 0.2]],
            vec![0.5, -0.2, 0.9],
            0.8,
        )
        .unwrap();
        let s = [0.2, 0.1];
        let g = m.gradient(&s).unwrap();
        for i in 0..2 {
            let h = 1e-6;
            let mut p = s;
            let mut q = s;
            p[i] += h;
            q[i] -= h;
            let fd = (m.raw(&p).unwrap() - m.raw(&q).unwrap()) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn levels_edge_cases() {
        let m = BarrierModel::from_expansion(vec![vec![0.0]], vec![1.0], 1.0).unwrap();
        assert!(matches!(compute_levels(&m, &[vec![0.0]], &[]), Err(KbseError::NoUnsafeSamples)));
        let (_, nu) = compute_levels(&m, &[vec![3.0]], &vec![vec![0.5]; 4]).unwrap();
        assert_eq!(nu, eval_barrier(&m, &[0.5]).unwrap());
        // Initial state sits higher than the unsafe one: certification must fail.
        let (eta, nu) = compute_levels(&m, &[vec![0.0]], &[vec![1.0]]).unwrap();
        assert!(nu <= eta);
        assert!(matches!(certify_values(eta, nu, 0.0, 10), Err(KbseError::InvalidBarrier { .. })));
    }

    #[test]
    fn certify_arithmetic() {
        assert_eq!(certify_values(0.0, 1.0, 0.0, 200).unwrap(), 0.0);
        assert!((certify_values(0.1, 1.0, 0.001, 200).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(certify_values(0.9, 1.0, 0.01, 200).unwrap(), 1.0);
        assert!(certify_values(0.0, 0.0, 0.0, 200).is_err());
        assert!(certify_values(0.5, 0.4, 0.0, 200).is_err());
    }

    fn identity_data(n: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
        (0..n)
            .map(|_| {
                let s = vec![rng.random_range(-2.0..2.0)];
                Transition::new(s.clone(), vec![rng.random_range(-1.0..1.0)], 0.0, s)
            })
            .collect()
    }

    #[test]
    fn compute_c_identity_dynamics_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = identity_data(12, &mut rng);
        let cme = fit_cme(&data, &kernel(0.5)).unwrap();
        let states: Vec<Vec<f64>> = data.iter().map(|t| t.s.clone()).collect();
        let labels: Vec<bool> = states.iter().map(|s| s[0] > 1.0).collect();
        let (centers, alpha) = fit_barrier(&states, &labels, &kernel(0.5), 1e-6).unwrap();
        let m = BarrierModel::from_expansion(centers, alpha, 0.5).unwrap();
        // The executed policy reproduces the recorded action at every training state.
        let lookup = data.clone();
        let policy = move |s: &[f64]| lookup.iter().find(|t| t.s.as_slice() == s).unwrap().a.clone();
        for t in &data {
            assert!(decrease_expression(&m, &cme, &t.s, &t.a).unwrap().abs() < 1e-8);
        }
        let dc = compute_c(&m, &cme, &states, &[vec![0.0]], &policy).unwrap();
        assert!(dc.c.abs() < 1e-8, "c = {}", dc.c);
    }

    #[test]
    fn compute_c_constant_barrier_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<Transition> = (0..10)
            .map(|_| {
                let s = vec![rng.random_range(-1.0..1.0)];
                let sp = vec![rng.random_range(-1.0..1.0)];
                Transition::new(s, vec![rng.random_range(-1.0..1.0)], 0.0, sp)
            })
            .collect();
        let cme = fit_cme(&data, &kernel(0.3)).unwrap();
        // A single center 1e4 bandwidths wide is constant to within 1e-8 on [-1, 1].
        let m = BarrierModel::from_expansion(vec![vec![0.0]], vec![0.4], 1e4).unwrap();
        let lookup = data.clone();
        let policy = move |s: &[f64]| lookup.iter().find(|t| t.s.as_slice() == s).unwrap().a.clone();
        let states: Vec<Vec<f64>> = data.iter().map(|t| t.s.clone()).collect();
        let dc = compute_c(&m, &cme, &states, &[vec![0.0]], &policy).unwrap();
        assert!(dc.c < 1e-7, "c = {}", dc.c);
    }

    #[test]
    fn penalty_term_is_epsilon_times_bbar() {
        let data = vec![Transition::new(vec![0.0], vec![0.0], 0.0, vec![0.0])];
        let cme = fit_cme(&data, &kernel(1.0)).unwrap();
        let mut m = BarrierModel::from_expansion(vec![vec![100.0]], vec![0.0], 1.0).unwrap();
        m.epsilon = 0.5;
        m.b_bar = 2.0;
        let v = decrease_expression(&m, &cme, &[0.0], &[0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn compute_c_monotone_in_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<Transition> = (0..30)
            .map(|_| {
                let s = vec![rng.random_range(-2.0..2.0)];
                let a = vec![rng.random_range(-1.0..1.0)];
                let sp = vec![0.9 * s[0] + 0.2 * a[0] + rng.random_range(-0.05..0.05)];
                Transition::new(s, a, 0.0, sp)
            })
            .collect();
        let k = KernelSpec::new(0.6, 0.6, 1e-3).unwrap();
        let cme = fit_cme(&data, &k).unwrap();
        let states: Vec<Vec<f64>> = data.iter().map(|t| t.s.clone()).collect();
        let labels: Vec<bool> = states.iter().map(|s| s[0] > 1.2).collect();
        let (centers, alpha) = fit_barrier(&states, &labels, &k, 1e-3).unwrap();
        let mut m = BarrierModel::from_expansion(centers, alpha, 0.6).unwrap();
        m.b_bar = m.rkhs_norm().unwrap();
        let policy = |_: &[f64]| vec![0.0];
        let mut prev = f64::NEG_INFINITY;
        for eps in [0.0, 0.01, 0.1, 0.5, 1.0] {
            m.epsilon = eps;
            let c = compute_c(&m, &cme, &states, &[vec![-1.0], vec![1.0]], &policy).unwrap();
            assert!(c.c >= prev);
            prev = c.c;
        }
    }

    #[test]
    fn document_round_trip_preserves_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let centers: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-1.0..1.0); 3]).collect();
        let alpha: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = BarrierModel::from_expansion(centers, alpha, 0.37).unwrap();
        m.eta = 0.1;
        m.nu = 0.9;
        m.valid = true;
        m.horizon_t = 200;
        let back = BarrierModel::from_json(&m.to_json().unwrap()).unwrap();
        for _ in 0..50 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!((eval_barrier(&m, &s).unwrap() - eval_barrier(&back, &s).unwrap()).abs() < 1e-12);
        }
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_document_names_field() {
        let m = BarrierModel::from_expansion(vec![vec![0.0]], vec![1.0], 1.0).unwrap();
        let mut doc = m.to_document();
        doc.alpha.push(2.0);
        let err = BarrierModel::from_document(doc).unwrap_err();
        assert!(err.to_string().contains("alpha"));
        let err = BarrierModel::from_json("{\"version\": 1}").unwrap_err();
        assert!(err.to_string().contains("missing field"), "{err}");
    }

    #[test]
    fn certificate_statements() {
        let mut m = BarrierModel::from_expansion(vec![vec![0.0]], vec![1.0], 1.0).unwrap();
        m.eta = 0.1;
        m.nu = 1.0;
        m.c = 0.001;
        m.horizon_t = 200;
        m.zeta = 1e-5;
        m.valid = true;
        let cert = m.certificate();
        assert!((cert.delta.unwrap() - 0.3).abs() < 1e-12);
        assert!(!cert.vacuous);
        assert!(cert.statement().contains("0.300000"));
        m.nu = 0.05;
        let cert = m.certificate();
        assert!(!cert.valid && cert.delta.is_none());
        assert!(cert.statement().contains("no valid barrier"));
    }
}
