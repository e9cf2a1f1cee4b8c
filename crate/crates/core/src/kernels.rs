//! Scalar loops shared by the autodiff graph and the cache-based decoder.
//!
//! Every routine computes each output row independently with a fixed
//! summation order, so processing one row at a time (incremental decoding)
//! and processing a whole sequence produce bitwise-identical results.

use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] = a[m,k] . b[k,n]`
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c[..m * n].fill(0.0);
    matmul_nn_acc(a, b, c, m, k, n);
}

/// `c[m,n] += a[m,k] . b[k,n]`
pub fn matmul_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], c_row);
        }
    }
}

/// `c[m,n] = a[m,k] . b[n,k]^T`
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[m,k] . b[n,k]^T`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]^T . b[m,n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], b_row, &mut c[p * n..(p + 1) * n]);
        }
    }
}

pub fn transpose(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Negative log-likelihood of `target` under `softmax(logits)`.
pub fn nll(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    SquaredRelu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SquaredRelu => {
                if x > 0.0 {
                    x * x
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SquaredRelu => {
                if x > 0.0 {
                    2.0 * x
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

/// Normalises one row; returns `(xhat, rstd)` through the out-parameters so
/// the graph can keep them for the backward pass.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64], xhat: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    rstd
}

/// Causal attention for one query row against `n_keys` cached rows.
///
/// `q`, and every key/value row, hold `heads * head_dim` values laid out head
/// by head; key and value rows are `stride` apart. `probs` receives the
/// `heads x n_keys` attention weights.
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    stride: usize,
    n_keys: usize,
    heads: usize,
    head_dim: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let scale = 1.0 / (head_dim as f64).sqrt();
    for h in 0..heads {
        let lo = h * head_dim;
        let qh = &q[lo..lo + head_dim];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for (s, ps) in p.iter_mut().enumerate() {
            *ps = dot(qh, &keys[s * stride + lo..s * stride + lo + head_dim]) * scale;
        }
        softmax_in_place(p);
        let oh = &mut out[lo..lo + head_dim];
        oh.fill(0.0);
        for (s, &ps) in p.iter().enumerate() {
            axpy(ps, &values[s * stride + lo..s * stride + lo + head_dim], oh);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_relu_values() {
        let a = Activation::SquaredRelu;
        assert_eq!(a.apply(0.0), 0.0);
        assert_eq!(a.apply(-3.0), 0.0);
        assert_eq!(a.apply(2.0), 4.0);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        let a = Activation::Gelu;
        let (x, h) = (0.7, 1e-5);
        let fd = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
        assert!((fd - a.derivative(x)).abs() < 1e-6);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }

    #[test]
    fn nll_of_uniform_logits_is_log_vocab() {
        assert!((nll(&[0.3; 4], 2) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn nll_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0, 700.0] {
            let l = nll(&[margin, 0.0, 0.0], 0);
            assert!(l <= prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn single_key_attention_returns_value() {
        let q = [0.3, -1.0];
        let k = [2.0, 5.0];
        let v = [7.0, -8.0];
        let mut out = [0.0; 2];
        let mut p = [0.0; 2];
        attend_row(&q, &k, &v, 2, 1, 2, 1, &mut out, &mut p);
        assert_eq!(out, v);
        assert_eq!(p, [1.0, 1.0]);
    }
}
