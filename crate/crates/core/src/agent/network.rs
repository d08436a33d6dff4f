//! Small dense networks with tanh hidden layers and a linear output layer.
//!
//! Batches are stored column-wise: an `n_in x batch` matrix holds one sample
//! per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, KbseError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Multi-layer perceptron `sizes[0] -> ... -> sizes[last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Intermediate values kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: DMatrix<f64>,
    hidden: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Layer { w: DMatrix::zeros(w[1], w[0]), b: DVector::zeros(w[1]) })
            .collect();
        Self { layers }
    }

    /// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; the
    /// output layer uses `U(-final_scale, final_scale)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], final_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let bound = if i == last { final_scale } else { 1.0 / (layer.w.ncols() as f64).sqrt() };
            layer.w.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
            layer.b.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.nrows()).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.nrows()));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters flattened layer by layer (weights column-major, then biases).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        check_dim(self.num_params(), theta.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&theta[offset..offset + nw]);
            offset += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&theta[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut x = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &x;
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i < last {
                z.apply(|v| *v = v.tanh());
                hidden.push(z.clone());
            }
            x = z;
        }
        (x, ForwardCache { input: input.clone(), hidden })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let (out, _) = self.forward(&DMatrix::from_column_slice(x.len(), 1, x));
        out.as_slice().to_vec()
    }

    /// Backpropagates `d_out` (`n_out x batch`). Returns the flat parameter
    /// gradient and the gradient with respect to the input batch.
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n);
        let mut delta = d_out.clone();
        for i in (0..n).rev() {
            let layer_in = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            let gw = &delta * layer_in.transpose();
            let gb = delta.column_sum();
            grads.push((gw, gb));
            let mut d_in = self.layers[i].w.transpose() * &delta;
            if i > 0 {
                d_in.zip_apply(&cache.hidden[i - 1], |d, h| *d *= 1.0 - h * h);
            }
            delta = d_in;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in &grads {
            flat.extend_from_slice(gw.as_slice());
            flat.extend_from_slice(gb.as_slice());
        }
        (flat, delta)
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn polyak_update(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.w.zip_apply(&s.w, |a, b| *a = tau * b + (1.0 - tau) * *a);
            t.b.zip_apply(&s.b, |a, b| *a = tau * b + (1.0 - tau) * *a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn from_params(sizes: &[usize], theta: &[f64]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(KbseError::InvalidArgument(format!("invalid network sizes {sizes:?}")));
        }
        let mut net = Self::zeros(sizes);
        net.set_params(theta)?;
        Ok(net)
    }
}

/// Adam optimiser over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Applies one descent step for `grad` to `theta`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
