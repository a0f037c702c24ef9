//! Adam with bias correction over a flat parameter vector.

use serde::{Deserialize, Serialize};

/// Optimizer hyperparameters. Defaults follow the agent's training setup:
/// a small learning rate, beta2 = 0.99 and epsilon = 0.01 / batch size 32.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 5e-5, beta1: 0.9, beta2: 0.99, epsilon: 0.01 / 32.0 }
    }
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Self { config, m: vec![0.0; param_count], v: vec![0.0; param_count], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - alpha * mhat / (sqrt(vhat) + eps)
/// with mhat, vhat the bias-corrected moments.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= c.alpha * m_hat / (v_hat.sqrt() + c.epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut state = AdamState::new(AdamConfig::default(), 3);
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        for _ in 0..5 {
            adam_step(&mut state, &mut params, &[0.0, 0.0, 0.0]);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn quadratic_trajectory_matches_reference_loop() {
        // Reference Adam written straight from the update equations, kept
        // independent of the production implementation.
        let (alpha, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut w_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * w_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w_ref -= alpha * m_hat / (v_hat.sqrt() + eps);
            reference.push(w_ref);
        }

        let cfg = AdamConfig { alpha, beta1: b1, beta2: b2, epsilon: eps };
        let mut state = AdamState::new(cfg, 1);
        let mut w = vec![1.0f64];
        for want in reference {
            let g = 2.0 * w[0];
            adam_step(&mut state, &mut w, &[g]);
            assert!((w[0] - want).abs() < 1e-10, "{} vs {want}", w[0]);
        }
        assert_eq!(state.step_count(), 10);
    }

    #[test]
    fn saturated_updates_stay_near_alpha() {
        // Huge constant-sign gradients: after bias-correction warmup the
        // displacement per step is bounded by roughly alpha.
        let cfg = AdamConfig { alpha: 0.01, ..AdamConfig::default() };
        let mut state = AdamState::new(cfg, 1);
        let mut w = vec![0.0f64];
        for _ in 0..50 {
            adam_step(&mut state, &mut w, &[1000.0]);
        }
        for _ in 0..20 {
            let before = w[0];
            adam_step(&mut state, &mut w, &[1000.0]);
            assert!((w[0] - before).abs() <= 1.1 * cfg.alpha);
        }
    }
}
