//! Adam optimizer with bias-corrected moment estimates.

use super::params::{ParamId, ParamStore};
use crate::error::NumError;

/// Optimizer hyperparameters. [`AdamConfig::with_lr`] supplies the standard
/// defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first/second moment buffers per parameter, allocated lazily
/// so one optimizer can serve any subset of a store's parameters.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        assert!(cfg.lr.is_finite() && cfg.lr >= 0.0, "adam: lr must be finite and non-negative");
        assert!((0.0..1.0).contains(&cfg.beta1), "adam: beta1 must be in [0,1)");
        assert!((0.0..1.0).contains(&cfg.beta2), "adam: beta2 must be in [0,1)");
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to exactly the parameters present in `grads`.
    ///
    /// If any gradient component is non-finite the step is aborted before
    /// any parameter or moment is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<(), NumError> {
        for (pid, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NumError::NonFiniteGrad {
                    name: store.name(*pid).to_string(),
                });
            }
            debug_assert_eq!(g.len(), store.numel(*pid), "gradient shape drift for '{}'", store.name(*pid));
        }

        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);

        for (pid, g) in grads {
            let idx = pid.index();
            if self.m.len() <= idx {
                self.m.resize(idx + 1, Vec::new());
                self.v.resize(idx + 1, Vec::new());
            }
            if self.m[idx].is_empty() {
                self.m[idx] = vec![0.0; g.len()];
                self.v[idx] = vec![0.0; g.len()];
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = store.values_mut(*pid);
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient components.
pub fn global_grad_norm(grads: &[(ParamId, Vec<f64>)]) -> f64 {
    let mut acc = 0.0;
    for (_, g) in grads {
        for &x in g {
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Scales all gradients down so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when no clipping happened).
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
    let norm = global_grad_norm(grads);
    if !norm.is_finite() || norm <= max_norm {
        return 1.0;
    }
    let factor = max_norm / norm;
    for (_, g) in grads.iter_mut() {
        for x in g.iter_mut() {
            *x *= factor;
        }
    }
    factor
}
