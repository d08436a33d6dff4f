#![allow(dead_code)]

use kbse::Transition;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// `exp(-|x - y|^2 / (2 bw^2))`, written out independently of the crate.
pub fn rbf_oracle(x: &[f64], y: &[f64], bw: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * bw * bw)).exp()
}

pub fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    s.iter().chain(a).copied().collect()
}

/// Conditional expectation by explicit dense inversion of `K + lambda N I`.
pub fn dense_cme_expectation(data: &[Transition], bw: f64, lambda: f64, f: &[f64], s: &[f64], a: &[f64]) -> f64 {
    let n = data.len();
    let xs: Vec<Vec<f64>> = data.iter().map(|t| concat(&t.s, &t.a)).collect();
    let k = DMatrix::from_fn(n, n, |i, j| rbf_oracle(&xs[i], &xs[j], bw) + if i == j { lambda * n as f64 } else { 0.0 });
    let inv = k.try_inverse().expect("oracle system must be invertible");
    let q = concat(s, a);
    let kv = DVector::from_iterator(n, xs.iter().map(|x| rbf_oracle(&q, x, bw)));
    let w = inv * kv;
    w.iter().zip(f).map(|(wi, fi)| wi * fi).sum()
}

pub fn random_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_transitions<R: Rng>(rng: &mut R, n: usize, p: usize, q: usize) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition::new(random_vec(rng, p, 1.0), random_vec(rng, q, 1.0), rng.random_range(-1.0..1.0), random_vec(rng, p, 1.0)))
        .collect()
}

/// Relative error with an absolute floor for near-zero components.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
