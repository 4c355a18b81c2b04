//! Training loops, optimizers, metrics and the coupling ablation.

mod ablation;
mod finetune;
mod metrics;
mod optim;
mod pretrain;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{ablate_coupling, AblationReport, AblationRun};
pub use finetune::{evaluate, finetune, load_labeled_jsonl, predict, FinetuneResult, LabeledExample};
pub use metrics::MetricReport;
pub use optim::{learning_rate, Adam, GradientSet, Optimizer, OptimizerKind, Sgd};
pub use pretrain::{pretrain, EpochLog, LossLog, PretrainOutputs, PretrainResult, LOSS_CSV_HEADER};

use crate::model::ModelError;
use crate::objectives::{LossWeights, ObjectiveError};
use crate::tensor::ParamId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in the {objective} objective at epoch {epoch}: {detail}")]
    NonFiniteLoss { objective: String, epoch: usize, detail: String },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: ParamId },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
}

impl TrainError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        TrainError::Io { context: context.into(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    /// Draw MLM masks once before training and reuse them every epoch
    /// instead of re-masking each batch.
    pub static_masks: bool,
}

impl TrainConfig {
    pub fn pretrain_defaults() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            initial_lr: 1e-5,
            decay: 0.9,
            seed: 0,
            weights: LossWeights::default(),
            clip_norm: 1.0,
            optimizer: OptimizerKind::Sgd,
            static_masks: false,
        }
    }

    pub fn finetune_defaults() -> Self {
        Self { epochs: 30, ..Self::pretrain_defaults() }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        learning_rate(self.initial_lr, self.decay, epoch)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return fail(format!("learning rate {} must be positive", self.initial_lr));
        }
        if !(self.decay.is_finite() && self.decay > 0.0) {
            return fail(format!("decay {} must be positive", self.decay));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return fail(format!("clip_norm {} must be >= 0", self.clip_norm));
        }
        self.weights.validate()?;
        Ok(())
    }
}
