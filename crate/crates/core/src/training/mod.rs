//! Adam with decoupled (optionally schedule-scaled) weight decay, a warmup
//! plus linear-decay schedule, a seeded trainer and gradient checks.

mod gradcheck;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport, TensorCheck};
pub use optim::{optimizer_step, AdamState};
pub use trainer::{BatchSource, MetricsLog, StepMetrics, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    /// Tokens per sequence, excluding the extra target token.
    pub seq_len: usize,
    pub seed: u64,
    /// Also decay scalar and vector parameters.
    pub decay_scalars: bool,
    /// Scale the decay by `lr_t / base_lr`.
    pub adamc: bool,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-3,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 8,
            seq_len: 512,
            seed: 0,
            decay_scalars: false,
            adamc: true,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.total_steps <= self.warmup_steps {
            return err("total_steps must exceed warmup_steps");
        }
        if !(self.base_lr > 0.0) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return err("base_lr and adam_eps must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return err("batch_size must be positive and seq_len at least 2");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return err("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over the warmup, then linear decay to 0 at
/// `total_steps`. Steps past the end give 0.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, n) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    let s = step as f64;
    if step >= cfg.total_steps {
        0.0
    } else if s < w {
        cfg.base_lr * s / w
    } else {
        cfg.base_lr * (n - s) / (n - w)
    }
}
