//! Toy data synthesis, parametric degradations and the pre-removal encoder fit.

mod data;
mod encoder;
mod kernel;

pub use data::{gen_dataset, Dataset, DatasetSpec, TextureSpec};
pub use encoder::{fit_preremoval_encoder, latent_distance, pretrain_autoencoder, reconstruction_error, FitConfig};
pub use kernel::{degrade, degrade_with, kernel_mismatch, BlurKernel, DegradationSpec, Operator};

use crate::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum DegradationError {
    #[error("invalid degradation: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel supports differ: {0}×{0} vs {1}×{1}")]
    Support(usize, usize),
    #[error("autoencoder is not pretrained: reconstruction error {error:.4} exceeds {limit}")]
    Unpretrained { error: f64, limit: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::autodiff::AutodiffError> for DegradationError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}
