//! AdamW, warmup-cosine schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(dim_err(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((_, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(dim_err(
                    "adamw",
                    format!("{:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: self.steps as usize,
                detail: format!("non-finite gradient for parameter {bad}"),
            });
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.steps as i32));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup > self.total {
            return Err(Error::Config(format!(
                "warmup ({}) exceeds total steps ({})",
                self.warmup, self.total
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config("learning rate must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Learning rate at `step`. The ramp reaches `base_lr` at `warmup`; the
    /// cosine then decays to exactly 0 at `total`.
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total {
            return 0.0;
        }
        if step < self.warmup {
            return self.base_lr * step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup) as f64;
        let progress = (step - self.warmup) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sum_sq().to_f64().unwrap_or(f64::INFINITY))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}
