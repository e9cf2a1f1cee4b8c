//! Adam with linear warmup followed by inverse-square-root decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { peak: 3e-3, warmup_steps: 100 }
    }
}

impl LrSchedule {
    /// Learning rate for 1-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        if step <= warm {
            self.peak * step / warm
        } else {
            self.peak * (warm / step).sqrt()
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        Self { m: vec![0.0; numel], v: vec![0.0; numel] }
    }
}

/// One in-place Adam update; `step` is 1-based. Entries whose gradient and
/// moments are all zero are left bitwise untouched.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64, step: usize) {
    let t = step.max(1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule { peak: 1.0, warmup_steps: 4 };
        assert_eq!(s.at(1), 0.25);
        assert_eq!(s.at(4), 1.0);
        assert_eq!(s.at(16), 0.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0, 1.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.5, -2.0], &mut st, &AdamConfig::default(), 0.1, 1);
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameter_bitwise() {
        let mut p = vec![0.123_456_789];
        let mut st = AdamState::new(1);
        for step in 1..50 {
            adam_step(&mut p, &[0.0], &mut st, &AdamConfig::default(), 0.01, step);
        }
        assert_eq!(p[0].to_bits(), 0.123_456_789f64.to_bits());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![3.0];
        let mut st = AdamState::new(1);
        for step in 1..2000 {
            let g = [2.0 * p[0]];
            adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.01, step);
        }
        assert!(p[0].abs() < 1e-2);
    }
}
