//! AdamW with per-group learning rates and a one-time step decay.
//!
//! For a parameter `θ` with gradient `g` at step `t` (starting at 1):
//!
//! ```text
//! m ← β1 m + (1 − β1) g
//! v ← β2 v + (1 − β2) g²
//! θ ← θ − lr · ( m / (1 − β1^t) / (sqrt(v / (1 − β2^t)) + ε) + λ θ )
//! ```
//!
//! The weight decay `λ` is decoupled from the adaptive term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Learning rate of transformer and head parameters.
    pub lr: f64,
    /// Learning rate of the patch-embedding stem.
    pub stem_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Factor applied to both learning rates at the drop epoch.
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            stem_lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.1,
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.lr, self.stem_lr, self.eps, self.lr_drop_factor];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("learning rates, eps and lr_drop_factor must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::config("weight_decay and grad_clip must be non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameter group: name prefix `stem.` selects the stem group.
pub fn is_stem_param(name: &str) -> bool {
    name.starts_with("stem.")
}

/// Optimizer state, one moment pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    /// Multiplier on both learning rates (1 before the drop).
    pub lr_scale: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            cfg,
            step: 0,
            lr_scale: 1.0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies the learning-rate drop. Idempotent.
    pub fn drop_lr(&mut self) {
        self.lr_scale = self.cfg.lr_drop_factor;
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr * self.lr_scale
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter_map(|(_, p)| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One update from the gradients held in `store`, which are then
    /// cleared. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if self.m.len() != store.len() {
            return Err(Error::usage("optimizer state does not match the parameter store"));
        }
        let norm = Self::grad_norm(store);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (k, p) in store.iter_mut().enumerate() {
            let lr = self.lr_scale
                * if is_stem_param(&p.name) {
                    self.cfg.stem_lr
                } else {
                    self.cfg.lr
                };
            let Some(grad) = p.tensor.grad.take() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, theta) in p.tensor.values_mut().iter_mut().enumerate() {
                let g = grad[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
                *theta -= lr * (update + self.cfg.weight_decay * *theta);
            }
        }
        Ok(norm)
    }
}
