//! Adam optimizer, learning-rate schedule, and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // GAN-lineage betas rather than the (0.9, 0.999) textbook default
        AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Constant learning rate for the first `epochs_constant` epochs, then a
/// linear ramp to zero at `epochs_total`.
pub fn lr_schedule(epoch: u64, lr0: f64, epochs_constant: u64, epochs_total: u64) -> f64 {
    if epoch < epochs_constant {
        lr0
    } else {
        let remaining = epochs_total.saturating_sub(epoch) as f64;
        let window = (epochs_total - epochs_constant) as f64;
        lr0 * (remaining / window).max(0.0)
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained a non-finite value; no parameter was touched.
    SkippedNonFinite,
}

/// Standard bias-corrected Adam over a whole parameter store.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Applies one update. Aborts (without touching parameters or moments)
    /// if any gradient value is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> StepOutcome {
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return StepOutcome::SkippedNonFinite;
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (idx, g) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = &mut store.value_mut(crate::params::ParamId(idx)).data;
            for ((pi, (mi, vi)), &gi) in p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.iter()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        StepOutcome::Applied
    }

    /// Serialized moment state, aligned with the store order.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
