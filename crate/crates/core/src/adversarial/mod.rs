//! Adversarial fine-tuning: generator initialization, GAN objective with
//! reconstruction terms, low-rank updates, EMA and inference-time controls.

mod baselines;
mod config;
mod generator;
mod losses;
mod train;

pub use baselines::{classifier_accuracy, pretrain_baseline, BaselineConfig, BaselineKind};
pub use config::{DiscInit, InitMode, TrainConfig};
pub use generator::{init_generator, lora_targets, restore, Assets, Controls, Generator, Head};
pub use losses::{d_loss_from_logits, g_adv_from_logits, gan_losses, GanLosses};
pub use train::{evaluate, init_run, train, EvalSet, MetricsRecord, MetricsSink, RunState, TrainData, TrainOptions};

use crate::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum AdversarialError {
    #[error("missing pretrained asset: {0}")]
    MissingAsset(&'static str),
    #[error("asset `{name}` has architecture {got:?}, expected {expected:?}")]
    ArchMismatch { name: &'static str, expected: Box<crate::models::Architecture>, got: Box<crate::models::Architecture> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metrics sink failed: {0}")]
    Sink(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl From<crate::autodiff::AutodiffError> for AdversarialError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}
