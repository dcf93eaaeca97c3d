use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// When weight decay is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum WdSchedule {
    Always,
    Never,
    /// Active while `epoch < epoch_cutoff`.
    BeforeEpoch {
        epoch: usize,
    },
    /// Active once `epoch >= epoch_cutoff`.
    AfterEpoch {
        epoch: usize,
    },
    /// Active on steps divisible by `k`. With `boost`, each active step applies
    /// the decay that `k` consecutive steps would have applied.
    EveryKSteps {
        k: usize,
        boost: bool,
    },
}

impl WdSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            WdSchedule::EveryKSteps { k: 0, .. } => Err(Error::InvalidConfig("every_k_steps needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Whether decay applies at `(epoch, step)`; `step` is the global step counter.
    pub fn is_active(&self, epoch: usize, step: usize) -> bool {
        match *self {
            WdSchedule::Always => true,
            WdSchedule::Never => false,
            WdSchedule::BeforeEpoch { epoch: cutoff } => epoch < cutoff,
            WdSchedule::AfterEpoch { epoch: cutoff } => epoch >= cutoff,
            WdSchedule::EveryKSteps { k, .. } => step.is_multiple_of(k.max(1)),
        }
    }

    /// Effective decay coefficient for this step given the base `lambda` and current `lr`.
    ///
    /// A boosted every-k step uses `λ′/lr` with `λ′ = 1 − (1 − lr·λ)^k`, so that one
    /// plain SGD step shrinks the weights by `(1 − lr·λ)^k`.
    pub fn lambda_at(&self, lambda: f64, epoch: usize, step: usize, lr: f64) -> f64 {
        if !self.is_active(epoch, step) {
            return 0.0;
        }
        match *self {
            WdSchedule::EveryKSteps { k, boost: true } if k > 1 && lr > 0.0 => {
                let shrink = 1.0 - (1.0 - lr * lambda).powi(k as i32);
                shrink / lr
            }
            _ => lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecayUnit {
    #[default]
    Epoch,
    Step,
}

/// Exponential learning-rate decay `base · decay^t`, with `t` counted in epochs or steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub unit: LrDecayUnit,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            decay: 1.0,
            unit: LrDecayUnit::Epoch,
        }
    }

    pub fn at(&self, epoch: usize, step: usize) -> f64 {
        let t = match self.unit {
            LrDecayUnit::Epoch => epoch,
            LrDecayUnit::Step => step,
        };
        self.base * self.decay.powi(t as i32)
    }
}
