//! AdamW, the warmup + cosine learning-rate schedule and EMA weight
//! averaging.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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
            weight_decay: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Optimizer state: per-parameter moments plus the step counter used for
/// bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptState {
    /// Fresh state with zero moments for every parameter in `params`.
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let moments = params
            .iter()
            .map(|(name, p)| {
                (
                    name.to_string(),
                    Moments {
                        first: Tensor::zeros(p.value.shape()),
                        second: Tensor::zeros(p.value.shape()),
                    },
                )
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// State with no moments; [`adamw_step`] refuses it.
    pub fn uninitialized(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One decoupled-weight-decay Adam update. Gradients are read but not
/// cleared.
pub fn adamw_step(params: &mut ParamSet, state: &mut OptState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::usage(format!("learning rate must be >= 0, got {lr}")));
    }
    for (name, p) in params.iter() {
        match state.moments.get(name) {
            Some(m) if m.first.same_shape(&p.value) => {}
            _ => {
                return Err(Error::usage(format!(
                    "optimizer state not initialized for parameter `{name}`"
                )))
            }
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state.moments.get_mut(name).expect("checked above");
        let decay = 1.0 - lr * weight_decay;
        for (((w, &g), m1), m2) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.first.data_mut())
            .zip(m.second.data_mut())
        {
            *w *= decay;
            *m1 = beta1 * *m1 + (1.0 - beta1) * g;
            *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
            let mhat = *m1 / bc1;
            let vhat = *m2 / bc2;
            let denom = vhat.sqrt() + eps;
            if denom > 0.0 {
                *w -= lr * mhat / denom;
            }
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then cosine decay to `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub final_lr: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return Err(Error::config("schedule.warmup_iters", "must not exceed total_iters"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("schedule.base_lr", "must be > 0"));
        }
        if !(self.final_lr >= 0.0) {
            return Err(Error::config("schedule.final_lr", "must be >= 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: u64) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::usage(format!(
                "iteration {iter} outside schedule of {} iterations",
                self.total_iters
            )));
        }
        if iter < self.warmup_iters {
            return Ok(self.base_lr * iter as f64 / self.warmup_iters as f64);
        }
        let span = self.total_iters - self.warmup_iters;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (iter - self.warmup_iters) as f64 / span as f64;
        Ok(self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + (PI * progress).cos()))
    }
}

/// `target ← m·target + (1−m)·source` for every parameter of `target`.
///
/// `source` may hold extra parameters (the student's predictor head); every
/// target parameter must exist in `source` with the same shape.
pub fn ema_update(target: &mut ParamSet, source: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::usage(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    for (name, p) in target.iter() {
        match source.get(name) {
            Some(s) if s.value.same_shape(&p.value) => {}
            _ => return Err(Error::usage(format!("EMA layout mismatch at parameter `{name}`"))),
        }
    }
    for (name, p) in target.iter_mut() {
        let s = &source.get(name).expect("checked above").value;
        for (t, &v) in p.value.data_mut().iter_mut().zip(s.data()) {
            *t = momentum * *t + (1.0 - momentum) * v;
        }
    }
    Ok(())
}
