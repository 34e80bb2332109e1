//! Configuration, persistence and orchestration around the training loop.

mod checkpoint;
mod config;
mod io;
mod pipeline;
mod report;

use std::path::PathBuf;

pub use checkpoint::{load_params, save_params, Checkpoint, ManifestEntry, CHECKPOINT_VERSION, MAGIC};
pub use config::{AssetPaths, DataConfig, EvalConfig, ExperimentConfig, ModelsConfig, PretrainConfig, ScheduleSpec, SEED_ENV};
pub use io::{read_data_file, read_metrics, write_data_file, DataFile, JsonlSink, RunLock};
pub use pipeline::{
    evaluate_checkpoint, finetune, load_run, pretrain, prepare, restore_file, save_run, EvalReport, PretrainKind, Prepared,
};
pub use report::{report, summarize, Report, RunSummary};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("output directory {0} is in use by another run (lock file present)")]
    Locked(PathBuf),
    #[error("{path}: line {line}: {detail}")]
    Log { path: PathBuf, line: usize, detail: String },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Adversarial(#[from] crate::adversarial::AdversarialError),
    #[error(transparent)]
    Degradation(#[from] crate::degradation::DegradationError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl From<crate::autodiff::AutodiffError> for HarnessError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(e.into())
    }
}

impl HarnessError {
    /// Process exit status: 2 for rejected configuration, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}
