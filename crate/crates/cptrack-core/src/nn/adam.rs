//! Adam optimizer with per-parameter-slot moment buffers.
//!
//! The optimizer is decoupled from any particular model layout: callers
//! register a fixed number of slots up front (one per parameter tensor) and
//! feed `(slot, params, grads)` triples each step in a stable order.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// `slot_sizes[i]` is the element count of parameter tensor `i`.
    pub fn new(cfg: AdamConfig, slot_sizes: &[usize]) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the per-slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to slot `slot` in place.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m[slot].len());
        let t = self.step as i32;
        let c1 = 1.0 - fmath::pow(self.cfg.beta1, t as f64);
        let c2 = 1.0 - fmath::pow(self.cfg.beta2, t as f64);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
            v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] -= self.cfg.lr * m_hat / (fmath::sqrt(v_hat) + self.cfg.eps);
        }
    }
}
