//! Fitting `loss = a * (N * D)^b + c` by multi-start Levenberg-Marquardt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    /// Non-embedding parameters.
    #[serde(rename = "N")]
    pub n: f64,
    /// Training tokens.
    #[serde(rename = "D")]
    pub d: f64,
    pub loss: f64,
}

impl ScalingPoint {
    pub fn new(n: f64, d: f64, loss: f64) -> Self {
        Self { n, d, loss }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rmse: f64,
}

/// Published fits kept for reference. The normalization of N and D behind
/// them is unknown, so they are not comparable with fits on raw counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFit {
    pub name: &'static str,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub const REFERENCE_BASELINE: ReferenceFit = ReferenceFit { name: "baseline", a: 14.08, b: -0.10, c: 0.89 };
pub const REFERENCE_MATFORMER: ReferenceFit = ReferenceFit { name: "matformer", a: 21.60, b: -0.13, c: 1.33 };

pub const START_EXPONENTS: [f64; 4] = [-0.05, -0.1, -0.2, -0.4];
const MAX_ITERS: usize = 1000;

pub fn eval_scaling(fit: &ScalingFit, n: f64, d: f64) -> f64 {
    fit.a * (n * d).powf(fit.b) + fit.c
}

fn sse(x: &[f64], y: &[f64], a: f64, b: f64, c: f64) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| (a * xi.powf(b) + c - yi).powi(2)).sum()
}

/// Least-squares `(a, c)` for a fixed exponent.
fn linear_ac(x: &[f64], y: &[f64], b: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let f: Vec<f64> = x.iter().map(|&xi| xi.powf(b)).collect();
    let (sf, sy) = (f.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sff: f64 = f.iter().map(|v| v * v).sum();
    let sfy: f64 = f.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * sff - sf * sf;
    if det.abs() <= 1e-300 * n * sff.max(1.0) {
        return (0.0, sy / n);
    }
    let a = (n * sfy - sf * sy) / det;
    (a, (sy - a * sf) / n)
}

fn solve3(m: [[f64; 3]; 3], v: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = v[r];
        }
        *o = det(mk) / d;
    }
    Some(out)
}

/// Levenberg-Marquardt from one starting point; returns `(a, b, c, sse)`.
fn levenberg_marquardt(x: &[f64], y: &[f64], start: (f64, f64, f64)) -> Option<(f64, f64, f64, f64)> {
    let ln_x: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let (mut a, mut b, mut c) = start;
    let mut cost = sse(x, y, a, b, c);
    let mut mu = 1e-3;
    for _ in 0..MAX_ITERS {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for ((&xi, &lx), &yi) in x.iter().zip(&ln_x).zip(y) {
            let p = xi.powf(b);
            let r = a * p + c - yi;
            let j = [p, a * p * lx, 1.0];
            for u in 0..3 {
                jtr[u] += j[u] * r;
                for v in 0..3 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let mut improved = false;
        while mu < 1e20 {
            let mut m = jtj;
            for (k, row) in m.iter_mut().enumerate() {
                row[k] += mu * jtj[k][k].max(1e-300);
            }
            let Some(step) = solve3(m, [-jtr[0], -jtr[1], -jtr[2]]) else {
                mu *= 10.0;
                continue;
            };
            let (na, nb, nc) = (a + step[0], b + step[1], c + step[2]);
            let new_cost = sse(x, y, na, nb, nc);
            if new_cost.is_finite() && new_cost <= cost {
                let small = step.iter().zip([a, b, c]).all(|(s, p)| s.abs() <= 1e-15 * (p.abs() + 1e-15));
                let flat = cost - new_cost <= 1e-30 + 1e-16 * cost;
                a = na;
                b = nb;
                c = nc;
                cost = new_cost;
                mu = (mu / 3.0).max(1e-15);
                improved = !(small || flat);
                break;
            }
            mu *= 2.0;
        }
        if !improved {
            break;
        }
    }
    (cost.is_finite() && a.is_finite() && b.is_finite() && c.is_finite()).then_some((a, b, c, cost))
}

/// Best fit over several starting exponents. Needs at least four points
/// with distinct `N * D`.
pub fn fit_power_law(points: &[ScalingPoint]) -> Result<ScalingFit> {
    for p in points {
        if !(p.n > 0.0 && p.d > 0.0 && p.loss > 0.0) || !(p.n * p.d).is_finite() || !p.loss.is_finite() {
            return Err(Error::Fit(format!("scaling point {p:?} is not positive and finite")));
        }
    }
    let x: Vec<f64> = points.iter().map(|p| p.n * p.d).collect();
    let y: Vec<f64> = points.iter().map(|p| p.loss).collect();
    let mut distinct = x.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::Fit(format!("{} distinct N*D values, need at least 4", distinct.len())));
    }
    let mut best: Option<(f64, f64, f64, f64)> = None;
    let mut failures = Vec::new();
    for b0 in START_EXPONENTS {
        let (a0, c0) = linear_ac(&x, &y, b0);
        match levenberg_marquardt(&x, &y, (a0, b0, c0)) {
            Some(fit) if best.map_or(true, |b| fit.3 < b.3) => best = Some(fit),
            Some(_) => {}
            None => failures.push(b0),
        }
    }
    let (a, b, c, cost) =
        best.ok_or_else(|| Error::Fit(format!("no start converged to a finite fit (starts {failures:?})")))?;
    Ok(ScalingFit { a, b, c, rmse: (cost / x.len() as f64).sqrt() })
}

/// RMSE of the best constant predictor.
pub fn constant_rmse(points: &[ScalingPoint]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.loss).sum::<f64>() / n;
    (points.iter().map(|p| (p.loss - mean).powi(2)).sum::<f64>() / n).sqrt()
}
