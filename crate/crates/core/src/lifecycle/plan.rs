use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::objectives::{LossWeights, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup then cosine decay to `lr_min` at the end of the budget.
    Cosine,
    /// Linear warmup then `lr_max` until the end.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_tokens: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub schedule: ScheduleKind,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            lr_max: 3e-4,
            lr_min: 3e-5,
            warmup_tokens: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl OptimizerSettings {
    /// Learning rate for the step that starts after `tokens` tokens.
    ///
    /// Warmup ramps linearly from `lr_min` to `lr_max`, so the first and
    /// last steps of a cosine run both sit at `lr_min`.
    pub fn lr_at(&self, tokens: u64, budget: u64) -> f64 {
        let (lo, hi) = (self.lr_min, self.lr_max);
        if tokens < self.warmup_tokens {
            return lo + (hi - lo) * tokens as f64 / self.warmup_tokens as f64;
        }
        match self.schedule {
            ScheduleKind::Constant => hi,
            ScheduleKind::Cosine => {
                let span = budget.saturating_sub(self.warmup_tokens);
                if span == 0 {
                    return hi;
                }
                let frac = ((tokens - self.warmup_tokens) as f64 / span as f64).min(1.0);
                lo + 0.5 * (hi - lo) * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Everything a training run needs besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub mode: TrainMode,
    pub budget_tokens: u64,
    /// Tokens per optimizer step.
    pub batch_tokens: usize,
    /// Tokens per forward/backward pass; gradients accumulate over
    /// `batch_tokens / micro_batch_tokens` passes.
    pub micro_batch_tokens: usize,
    pub segment_length: usize,
    pub optimizer: OptimizerSettings,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    pub seed: u64,
}

impl TrainPlan {
    /// Pretraining plan sized for a workstation CPU.
    pub fn desk_pretrain() -> Self {
        let budget = 5_000_000;
        TrainPlan {
            mode: TrainMode::Pretrain,
            budget_tokens: budget,
            batch_tokens: 4096,
            micro_batch_tokens: 2048,
            segment_length: 64,
            optimizer: OptimizerSettings {
                lr_max: 2e-3,
                lr_min: 2e-4,
                warmup_tokens: budget / 20,
                ..OptimizerSettings::default()
            },
            loss_weights: LossWeights::pretrain(),
            corpus: None,
            validation: None,
            seed: 0,
        }
    }

    pub fn desk_finetune() -> Self {
        TrainPlan {
            mode: TrainMode::FinetuneConcentrate,
            budget_tokens: 400_000,
            // a few hundred steps need a far stronger pull than 0.001
            batch_tokens: 1024,
            micro_batch_tokens: 1024,
            optimizer: OptimizerSettings {
                lr_max: 2e-3,
                lr_min: 2e-3,
                warmup_tokens: 0,
                schedule: ScheduleKind::Constant,
                ..OptimizerSettings::default()
            },
            loss_weights: LossWeights {
                concentration: 1.0,
                ..LossWeights::NONE
            },
            ..Self::desk_pretrain()
        }
    }

    pub fn desk_continual(reg_weight: f64) -> Self {
        TrainPlan {
            mode: TrainMode::ContinualInsert,
            budget_tokens: 400_000,
            optimizer: OptimizerSettings {
                lr_max: 1e-3,
                lr_min: 1e-3,
                warmup_tokens: 0,
                schedule: ScheduleKind::Constant,
                ..OptimizerSettings::default()
            },
            loss_weights: LossWeights::continual(reg_weight),
            ..Self::desk_pretrain()
        }
    }

    pub fn steps(&self) -> u64 {
        self.budget_tokens / self.batch_tokens as u64
    }

    /// Independent segments processed side by side in each step.
    pub fn streams(&self) -> usize {
        self.batch_tokens / self.segment_length
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if self.segment_length == 0 || self.batch_tokens == 0 || self.micro_batch_tokens == 0 {
            return Err(config_err!("segment, batch and micro-batch sizes must be positive"));
        }
        if self.batch_tokens % self.segment_length != 0 {
            return Err(config_err!(
                "batch_tokens {} is not a multiple of segment_length {}",
                self.batch_tokens,
                self.segment_length
            ));
        }
        if self.micro_batch_tokens % self.segment_length != 0 || self.batch_tokens % self.micro_batch_tokens != 0 {
            return Err(config_err!(
                "micro_batch_tokens {} must be a multiple of segment_length and divide batch_tokens",
                self.micro_batch_tokens
            ));
        }
        if !(o.lr_min >= 0.0 && o.lr_min <= o.lr_max && o.lr_max.is_finite()) {
            return Err(config_err!("need 0 ≤ lr_min ≤ lr_max, got {} and {}", o.lr_min, o.lr_max));
        }
        if o.warmup_tokens > self.budget_tokens {
            return Err(config_err!(
                "warmup {} exceeds budget {}",
                o.warmup_tokens,
                self.budget_tokens
            ));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(o.beta1) || !unit(o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) || !(o.grad_clip >= 0.0) {
            return Err(config_err!("optimizer hyperparameters out of range: {o:?}"));
        }
        self.loss_weights.validate(self.mode)
    }
}
