//! AdamW with linear warmup and cosine decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.warmup_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Step size for a run of `total_steps` optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &OptimizerConfig, total_steps: usize) -> Self {
        Self {
            lr: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps: (cfg.warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    /// Rate for the 0-indexed `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// Which tensors receive decoupled weight decay: matrices, not biases,
/// norm gains, or the mask token.
pub fn decays(name: &str, tensor: &Tensor<f32>) -> bool {
    tensor.rank() >= 2 && name != "mask_token"
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            p.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect::<ParamStore<f32>>()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            cfg,
            step: 0,
        }
    }

    /// One update at rate `lr`. Parameters absent from `grads` are left
    /// untouched (frozen).
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr_t = (lr / bc1) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.cfg.eps as f32;
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            let decay = if decays(name, p) {
                (1.0 - lr * self.cfg.weight_decay) as f32
            } else {
                1.0
            };
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("optimizer has no state for {name}")))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("optimizer has no state for {name}")))?;
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w = *w * decay - lr_t * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
