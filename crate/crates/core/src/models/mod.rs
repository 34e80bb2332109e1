//! Network descriptors, parameters, adapters and optimizers.

mod ema;
mod lora;
mod nets;
mod optim;
mod params;

pub use ema::EmaState;
pub use lora::{lora_effective, BoundLora, BoundPair, LoraAdapter, LoraPair};
pub use nets::{
    autoencoder_forward, critic, decode, denoiser, discriminator_forward, encode, score_net_forward, time_embedding,
};
pub use optim::Adam;
pub use params::{Architecture, Bound, ModelParams, TensorMap};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Descriptor(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("input has shape {got:?}, expected {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error("rank {rank} exceeds min(d_out, d_in) = {max} for `{name}`")]
    Rank { name: String, rank: usize, max: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
