//! Noise schedules, denoising score matching, sampling and the analytic scores
//! used as oracles.

mod dsm;
mod gmm;
mod sample;
mod schedule;

pub use dsm::{draw_corruption, dsm_loss, dsm_loss_graph, dsm_loss_with, pretrain_dsm, Corruption, DsmConfig};
pub use gmm::{analytic_gmm_score, score_error, score_error_with, GmmSpec};
pub use sample::{ancestral_sample, one_step_graph, one_step_restore, restore_from_score, score};
pub use schedule::{forward_corrupt, make_schedule, NoiseSchedule};

use crate::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("time index {t} outside 0..{steps}")]
    Time { t: usize, steps: usize },
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::autodiff::AutodiffError> for DiffusionError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}
