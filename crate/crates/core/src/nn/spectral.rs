//! Spectral normalization: weights are divided by an estimate of their top
//! singular value, kept current by one power-iteration step per refresh.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct SpectralNorm {
    rows: usize,
    cols: usize,
    pub(crate) u: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|v| *v /= norm);
}

fn mat_vec(w: &[f32], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, &b)| a as f64 * b).sum()).collect()
}

fn mat_t_vec(w: &[f32], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let xr = x[r];
        for (o, &a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a as f64 * xr;
        }
    }
    out
}

impl SpectralNorm {
    /// Starts from a random direction and runs `warmup` power iterations so the
    /// first forward pass already sees a converged estimate.
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, w: &[f32], warmup: usize, rng: &mut R) -> Self {
        let mut u = (0..rows).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        normalize(&mut u);
        let mut sn = Self { rows, cols, u: u.iter().map(|&x| x as f32).collect(), v: vec![0.0; cols] };
        for _ in 0..warmup.max(1) {
            sn.refresh(w);
        }
        sn
    }

    /// One power-iteration step: `v = W^T u / |.|`, `u = W v / |.|`.
    pub fn refresh(&mut self, w: &[f32]) {
        let u: Vec<f64> = self.u.iter().map(|&x| x as f64).collect();
        let mut v = mat_t_vec(w, self.rows, self.cols, &u);
        normalize(&mut v);
        let mut u = mat_vec(w, self.rows, self.cols, &v);
        normalize(&mut u);
        self.u = u.iter().map(|&x| x as f32).collect();
        self.v = v.iter().map(|&x| x as f32).collect();
    }

    /// `sigma = u^T W v` with the stored vectors held constant.
    pub fn sigma(&self, w: &[f32]) -> f32 {
        let v: Vec<f64> = self.v.iter().map(|&x| x as f64).collect();
        let wv = mat_vec(w, self.rows, self.cols, &v);
        let s: f64 = wv.iter().zip(&self.u).map(|(a, &b)| a * b as f64).sum();
        (s as f32).max(1e-12)
    }

    /// Gradient w.r.t. the raw weight given the gradient w.r.t. `W / sigma`:
    /// `G / sigma - (<G, W_sn> / sigma) u v^T`.
    pub fn backward(&self, w_sn: &[f32], sigma: f32, grad_sn: &[f32], grad_w: &mut [f32]) {
        let inner: f64 = grad_sn.iter().zip(w_sn).map(|(&g, &w)| g as f64 * w as f64).sum();
        let coef = (inner / sigma as f64) as f32;
        let inv = 1.0 / sigma;
        for r in 0..self.rows {
            let ur = self.u[r] * coef;
            let row = r * self.cols;
            for c in 0..self.cols {
                grad_w[row + c] += grad_sn[row + c] * inv - ur * self.v[c];
            }
        }
    }
}

/// Power-iteration estimate of the largest singular value, iterated to
/// convergence (independent of the layer's single-step estimate).
pub fn top_singular_value(w: &[f32], rows: usize, cols: usize, iterations: usize) -> f64 {
    let mut v = vec![1.0f64; cols];
    for (i, x) in v.iter_mut().enumerate() {
        *x += (i as f64 * 0.618).sin() * 0.5;
    }
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let u = mat_vec(w, rows, cols, &v);
        sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut next = mat_t_vec(w, rows, cols, &u);
        normalize(&mut next);
        v = next;
    }
    sigma
}
