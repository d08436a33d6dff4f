//! RBF kernels, Gram matrices and regularized symmetric solves.
//!
//! Everything downstream (the conditional mean embedding, the barrier
//! expansion and its RKHS norm) is built from the primitives here. Gram
//! matrices are dense; sample sizes are bounded by the barrier sample size.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KbseError, Result};

/// Initial diagonal jitter tried when the regularized Gram is not numerically SPD.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const JITTER_CAP: f64 = 1e-4;

/// Maximum number of pairs used by [`median_bandwidth`].
pub const MEDIAN_MAX_PAIRS: usize = 1000;

/// Parameters of the state kernel `k_S` and the state-action kernel `k_SA`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth_state: f64,
    pub bandwidth_state_action: f64,
    /// Ridge constant of the embedding solve, applied as `lambda * N`.
    pub regularization_lambda: f64,
    /// Upper bound on `k(s, s)`; exactly 1 for the RBF kernel.
    pub kernel_bound_c: f64,
}

impl KernelSpec {
    pub fn new(bandwidth_state: f64, bandwidth_state_action: f64, regularization_lambda: f64) -> Result<Self> {
        let spec = Self {
            bandwidth_state,
            bandwidth_state_action,
            regularization_lambda,
            kernel_bound_c: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_bandwidth(self.bandwidth_state)?;
        check_bandwidth(self.bandwidth_state_action)?;
        if !(self.regularization_lambda >= 0.0) || !self.regularization_lambda.is_finite() {
            return Err(KbseError::InvalidArgument(format!(
                "regularization_lambda must be finite and non-negative, got {}",
                self.regularization_lambda
            )));
        }
        if !(self.kernel_bound_c > 0.0) {
            return Err(KbseError::InvalidArgument(format!(
                "kernel_bound_c must be positive, got {}",
                self.kernel_bound_c
            )));
        }
        Ok(())
    }
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(KbseError::InvalidArgument(format!(
            "bandwidth must be positive and finite, got {bandwidth}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Unchecked RBF evaluation for hot loops; callers guarantee equal lengths.
#[inline]
pub(crate) fn rbf(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    (-squared_distance(x, y) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Radial basis function kernel `exp(-|x - y|^2 / (2 bandwidth^2))`.
pub fn rbf_eval(x: &[f64], y: &[f64], bandwidth: f64) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    check_bandwidth(bandwidth)?;
    Ok(rbf(x, y, bandwidth))
}

/// Gram matrix of `points` under the RBF kernel.
///
/// Only the lower triangle is evaluated; the upper triangle is mirrored so the
/// result is exactly symmetric.
pub fn gram_matrix(points: &[Vec<f64>], bandwidth: f64) -> Result<DMatrix<f64>> {
    let first = points
        .first()
        .ok_or_else(|| KbseError::InvalidArgument("gram_matrix needs at least one point".into()))?;
    check_bandwidth(bandwidth)?;
    for p in points {
        check_dim(first.len(), p.len())?;
    }
    let n = points.len();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        gram[(i, i)] = 1.0;
        for j in 0..i {
            let v = rbf(&points[i], &points[j], bandwidth);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(gram)
}

/// Kernel vector `[k(x, points_i)]_i`.
pub fn kernel_vector(points: &[Vec<f64>], x: &[f64], bandwidth: f64) -> Result<DVector<f64>> {
    check_bandwidth(bandwidth)?;
    for p in points {
        check_dim(x.len(), p.len())?;
    }
    Ok(DVector::from_iterator(
        points.len(),
        points.iter().map(|p| rbf(x, p, bandwidth)),
    ))
}

/// Cholesky factor of `gram + lambda * n * I (+ jitter * I)`.
#[derive(Debug, Clone)]
pub struct GramFactor {
    pub n: usize,
    pub gram: DMatrix<f64>,
    pub lambda: f64,
    pub jitter_used: f64,
    chol: Cholesky<f64, Dyn>,
}

impl GramFactor {
    /// Lower-triangular factor `L` with `L L^T = gram + (lambda n + jitter) I`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// The matrix that was actually factorized.
    pub fn regularized(&self) -> DMatrix<f64> {
        regularize(&self.gram, self.lambda * self.n as f64 + self.jitter_used)
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.gram.nrows(), b.len())?;
        Ok(self.chol.solve(b))
    }
}

fn regularize(gram: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let mut m = gram.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += shift;
    }
    m
}

/// Factorizes a symmetric matrix with escalating jitter.
///
/// Plain Cholesky is attempted on `gram + lambda*n*I`; on failure a diagonal
/// jitter starting at [`JITTER_START`] is doubled until [`JITTER_CAP`].
pub fn factorize(gram: &DMatrix<f64>, lambda: f64, n: usize) -> Result<GramFactor> {
    factorize_shifted(gram, lambda * n as f64).map(|(chol, jitter_used)| GramFactor {
        n,
        gram: gram.clone(),
        lambda,
        jitter_used,
        chol,
    })
}

/// Cholesky of `matrix + shift * I` with the same jitter escalation as [`factorize`].
pub(crate) fn factorize_shifted(matrix: &DMatrix<f64>, shift: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if !matrix.is_square() {
        return Err(KbseError::InvalidArgument(format!(
            "factorize expects a square matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if matrix.nrows() == 0 {
        return Err(KbseError::InvalidArgument("factorize expects a non-empty matrix".into()));
    }
    if !(shift >= 0.0) || !shift.is_finite() {
        return Err(KbseError::InvalidArgument(format!("regularization must be non-negative, got {shift}")));
    }
    if let Some(chol) = Cholesky::new(regularize(matrix, shift)) {
        return Ok((chol, 0.0));
    }
    let mut jitter = JITTER_START;
    loop {
        if let Some(chol) = Cholesky::new(regularize(matrix, shift + jitter)) {
            log::debug!("cholesky needed jitter {jitter:e}");
            return Ok((chol, jitter));
        }
        if jitter >= JITTER_CAP {
            break;
        }
        jitter = (jitter * 2.0).min(JITTER_CAP);
    }
    let eig = SymmetricEigen::new(regularize(matrix, shift + jitter)).eigenvalues;
    let max = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    Err(KbseError::Factorization {
        jitter,
        condition: if min > 0.0 { max / min } else { f64::INFINITY },
    })
}

/// RKHS norm `sqrt(alpha^T K alpha)` of a kernel expansion.
pub fn rkhs_norm(alpha: &DVector<f64>, gram: &DMatrix<f64>) -> Result<f64> {
    check_dim(gram.nrows(), alpha.len())?;
    check_dim(gram.ncols(), alpha.len())?;
    let quad = alpha.dot(&(gram * alpha));
    Ok(quad.max(0.0).sqrt())
}

/// Median heuristic for the RBF bandwidth.
///
/// Uses every pair when there are at most [`MEDIAN_MAX_PAIRS`] of them and a
/// uniform subsample of that many pairs otherwise. Zero distances from
/// duplicated points are skipped; if every point coincides the bandwidth is 1.
pub fn median_bandwidth<R: Rng + ?Sized>(points: &[Vec<f64>], rng: &mut R) -> Result<f64> {
    if points.len() < 2 {
        return Err(KbseError::InvalidArgument(
            "median_bandwidth needs at least two points".into(),
        ));
    }
    let dim = points[0].len();
    for p in points {
        check_dim(dim, p.len())?;
    }
    let n = points.len();
    let total_pairs = n * (n - 1) / 2;
    let mut distances: Vec<f64> = if total_pairs <= MEDIAN_MAX_PAIRS {
        let mut d = Vec::with_capacity(total_pairs);
        for i in 0..n {
            for j in 0..i {
                d.push(squared_distance(&points[i], &points[j]).sqrt());
            }
        }
        d
    } else {
        (0..MEDIAN_MAX_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                squared_distance(&points[i], &points[j]).sqrt()
            })
            .collect()
    };
    distances.retain(|d| *d > 0.0);
    if distances.is_empty() {
        return Ok(1.0);
    }
    Ok(median(&mut distances))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 0 {
        0.5 * (values[m - 1] + values[m])
    } else {
        values[m]
    }
}
