use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::models::{critic, denoiser, discriminator_forward, Adam, Architecture, ModelParams};
use crate::rng;
use crate::scalar::Scalar;

use super::AdversarialError;

/// Non-diffusion pretraining used to seed comparison generators or the critic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Paired regression `y → x`.
    Mse,
    /// Denoising autoencoder `x + ν·ε → x`.
    Dae,
    /// Clean-versus-degraded classifier.
    DiscClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Corruption scale for the denoising autoencoder.
    pub dae_noise: f64,
    /// Time index the regression networks are queried at.
    pub t_star: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 128, lr: 1e-3, seed: 0, dae_noise: 0.5, t_star: 0 }
    }
}

/// Trains a fresh network of `arch` for `kind`; returns it with the loss trace.
///
/// `clean` and `degraded` are row-paired. The autoencoder only reads `clean`.
pub fn pretrain_baseline<T: Scalar>(
    kind: BaselineKind,
    arch: &Architecture,
    clean: &Tensor<T>,
    degraded: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    cfg: &BaselineConfig,
) -> Result<(ModelParams<T>, Vec<T>), AdversarialError> {
    let n = clean.shape()[0];
    if n == 0 || degraded.shape()[0] != n {
        return Err(AdversarialError::Shape(format!("{:?} clean vs {:?} degraded", clean.shape(), degraded.shape())));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(AdversarialError::Config("baseline batch and lr must be positive".into()));
    }
    let is_critic = matches!(arch, Architecture::MlpCritic { .. } | Architecture::ConvCritic { .. });
    if is_critic != (kind == BaselineKind::DiscClassifier) {
        return Err(AdversarialError::Config(format!("{kind:?} cannot train architecture {arch:?}")));
    }
    let mut r = rng::derive(cfg.seed, "baseline");
    let mut params = ModelParams::init(arch.clone(), &mut r)?;
    let mut opt = Adam::new(T::of(cfg.lr), params.tensors());
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..n)).collect();
        let x = clean.select_rows(&idx);
        let c = cond.map(|c| c.select_rows(&idx));
        let tape = Tape::new();
        let p = params.bind(&tape, |_| true);
        let t = vec![cfg.t_star; cfg.batch];
        let loss = match kind {
            BaselineKind::Mse => {
                let y = tape.constant(degraded.select_rows(&idx));
                denoiser(&p, arch, y, &t, c.as_ref())?.squared_error(tape.constant(x))?
            }
            BaselineKind::Dae => {
                let nu = T::of(cfg.dae_noise);
                let noisy = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + nu * rng::normal::<T>(&mut r));
                denoiser(&p, arch, tape.constant(noisy), &t, c.as_ref())?.squared_error(tape.constant(x))?
            }
            BaselineKind::DiscClassifier => {
                let (lr, _) = critic(&p, arch, tape.constant(x))?;
                let (lf, _) = critic(&p, arch, tape.constant(degraded.select_rows(&idx)))?;
                lr.scale(-T::one())?.softplus()?.mean()?.add(lf.softplus()?.mean()?)?
            }
        };
        tape.backward(loss)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(AdversarialError::Diverged { step: trace.len() + 1, detail: format!("{kind:?} loss = {v}") });
        }
        trace.push(v);
        let grads = p.grads(&names)?;
        params.step(&mut opt, &grads)?;
    }
    Ok((params, trace))
}

/// Fraction of rows the critic places on the correct side of zero.
pub fn classifier_accuracy<T: Scalar>(disc: &ModelParams<T>, clean: &Tensor<T>, degraded: &Tensor<T>) -> Result<f64, AdversarialError> {
    let (lr, _) = discriminator_forward(disc, clean)?;
    let (lf, _) = discriminator_forward(disc, degraded)?;
    let hits = lr.iter().filter(|l| l.f64() > 0.0).count() + lf.iter().filter(|l| l.f64() < 0.0).count();
    Ok(hits as f64 / (lr.len() + lf.len()) as f64)
}
