//! SGD with momentum and weight decay, learning-rate schedules and early
//! stopping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::prune::Mask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// ×0.1 at 50% and again at 75% of the run.
    Step,
    /// Linear per-epoch warmup, then the step drops.
    WarmupStep,
    /// Linear per-epoch warmup, then constant.
    Warmup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_start_lr: f64,
    /// Defaults to 10% of `total_epochs` (at least one) when unset.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    pub total_epochs: usize,
}

pub const DROP_FACTOR: f64 = 0.1;

impl Schedule {
    pub fn constant(lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base_lr: lr,
            warmup_start_lr: lr,
            warmup_epochs: Some(0),
            total_epochs,
        }
    }

    pub fn step(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Step,
            ..Self::constant(base_lr, total_epochs)
        }
    }

    pub fn warmup_step(start_lr: f64, base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::WarmupStep,
            base_lr,
            warmup_start_lr: start_lr,
            warmup_epochs: Some(warmup_epochs),
            total_epochs,
        }
    }

    pub fn warmup(start_lr: f64, base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Warmup,
            ..Self::warmup_step(start_lr, base_lr, warmup_epochs, total_epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::contract("schedule needs at least one epoch"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::contract(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if matches!(self.kind, ScheduleKind::WarmupStep | ScheduleKind::Warmup)
            && self.warmup_len() > 0
            && !(self.warmup_start_lr > 0.0 && self.warmup_start_lr.is_finite())
        {
            return Err(Error::contract(format!(
                "warmup_start_lr must be positive, got {}",
                self.warmup_start_lr
            )));
        }
        Ok(())
    }

    pub fn warmup_len(&self) -> usize {
        match self.kind {
            ScheduleKind::WarmupStep | ScheduleKind::Warmup => self
                .warmup_epochs
                .unwrap_or_else(|| ((self.total_epochs as f64 * 0.1).round() as usize).max(1)),
            _ => 0,
        }
    }

    /// Epochs at which the step kinds multiply the rate by [`DROP_FACTOR`].
    pub fn drop_epochs(&self) -> [usize; 2] {
        [self.total_epochs / 2, self.total_epochs * 3 / 4]
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let warm = self.warmup_len();
        let mut lr = if epoch < warm {
            let t = epoch as f64 / warm as f64;
            self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * t
        } else {
            self.base_lr
        };
        if matches!(self.kind, ScheduleKind::Step | ScheduleKind::WarmupStep) {
            for drop in self.drop_epochs() {
                if epoch >= drop {
                    lr *= DROP_FACTOR;
                }
            }
        }
        Ok(lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Momentum SGD: `v ← μ·v + g + λ·w`, `w ← w − lr·v`. Decay applies to
/// prunable weights only.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: IndexMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: IndexMap::new(),
        }
    }

    /// Applies one update. With a mask, gradients are masked before the
    /// update and weights after it, so pruned coordinates stay exactly zero.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor<f32>],
        lr: f64,
        mask: Option<&Mask>,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{name}`"),
                });
            }
        }
        let (mu, wd, lr) = (
            self.config.momentum as f32,
            self.config.weight_decay as f32,
            lr as f32,
        );
        for ((name, p), g) in params.iter_mut().zip(grads) {
            let keep = mask.and_then(|m| m.get(name));
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.prunable { wd } else { 0.0 };
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let mut gi = g.data()[i];
                if let Some(k) = keep {
                    if !k.bits()[i] {
                        gi = 0.0;
                    }
                }
                v[i] = mu * v[i] + gi + decay * w[i];
                w[i] -= lr * v[i];
            }
            if let Some(k) = keep {
                for (wi, &b) in w.iter_mut().zip(k.bits()) {
                    if !b {
                        *wi = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Tracks the best validation metric; fires once `patience` epochs pass
/// without a strict improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> Result<bool> {
        if !metric.is_finite() {
            return Err(Error::NonFinite {
                context: "early-stopping metric".into(),
            });
        }
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
        }
        Ok(epoch.saturating_sub(self.best_epoch) >= self.patience)
    }
}
