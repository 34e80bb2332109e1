pub mod adversarial;
pub mod autodiff;
pub mod degradation;
pub mod diffusion;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scalar;

pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Params64 = models::ModelParams<f64>;
pub type Params32 = models::ModelParams<f32>;
