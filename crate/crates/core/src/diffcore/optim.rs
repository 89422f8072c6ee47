//! Adaptive-moment optimizer with decoupled weight decay, global gradient
//! norm clipping and a linear-warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::DiffError;

/// A named, learnable tensor. Gradients accumulate in `tensor.grad`.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.with_grad(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_threshold: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            total_steps: 2000,
            clip_threshold: 1.0,
        }
    }
}

/// Per-parameter moment buffers plus the shared schedule state.
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

/// What one update did; logged as a loss-history row by the training loop.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &[Parameter]) -> Self {
        let moments = params
            .iter()
            .map(|p| (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()]))
            .collect();
        Optimizer { cfg, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Schedule value for a given step index: linear warmup from 0, then
    /// cosine decay to 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let c = &self.cfg;
        if c.warmup_steps > 0 && step < c.warmup_steps {
            return c.peak_lr * step as f64 / c.warmup_steps as f64;
        }
        if step >= c.total_steps {
            return 0.0;
        }
        let span = (c.total_steps - c.warmup_steps).max(1) as f64;
        let progress = (step - c.warmup_steps) as f64 / span;
        c.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Clip the global gradient norm, apply one update, zero the grads.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<StepStats, DiffError> {
        assert_eq!(params.len(), self.moments.len(), "parameter set changed");
        // Reject non-finite gradients before touching any state.
        let mut sq_norm = 0.0;
        for p in params.iter() {
            let g = p.tensor.grad.as_ref().ok_or_else(|| DiffError::MissingGradient {
                param: p.name.clone(),
            })?;
            for &v in g {
                if !v.is_finite() {
                    return Err(DiffError::NonFiniteGradient { param: p.name.clone() });
                }
                sq_norm += v * v;
            }
        }
        let grad_norm = sq_norm.sqrt();
        let clipped = grad_norm > self.cfg.clip_threshold;
        let clip_scale = if clipped {
            self.cfg.clip_threshold / grad_norm
        } else {
            1.0
        };

        let lr = self.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let grad = p.tensor.grad.as_ref().unwrap().clone();
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j] * clip_scale;
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[j]);
            }
            p.tensor.zero_grad();
        }
        let stats = StepStats { step: self.step, lr, grad_norm, clipped };
        self.step += 1;
        Ok(stats)
    }
}

/// Scale all gradients so the global norm does not exceed `threshold`.
/// Exposed separately so the clipping contract can be tested in isolation.
pub fn clip_global_norm(grads: &mut [Vec<f64>], threshold: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
