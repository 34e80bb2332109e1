//! Distribution distances, mode diagnostics, texture statistics and the
//! closed-form theory calculators.

mod hist;
mod ot;
mod stats;
mod texture;
mod theory;

pub use hist::{mode_mass_gap, tv_hist, HistGrid, Partition};
pub use ot::{assignment, w2_exact, w2_sliced, W2_EXACT_CAP};
pub use stats::{grad_norm, log_linear_fit, median, spearman, LinearFit};
pub use texture::{texture_richness, texture_richness_batch};
pub use theory::{jacobian_norm_estimate, lemma_bound, Forward, predicted_steps, JacobianEstimate, TheoryConstants};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("sample sets differ: {0}")]
    Size(String),
    #[error("{n} samples exceed the exact-assignment cap of {cap}")]
    Cap { n: usize, cap: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}
