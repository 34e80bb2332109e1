use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::models::{denoiser, score_net_forward, Adam, Bound, EmaState, ModelParams};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::schedule::corrupt_rows;
use super::{DiffusionError, NoiseSchedule};

/// One draw of time indices and noise applied to a clean batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption<T> {
    pub t: Vec<usize>,
    pub noise: Tensor<T>,
    pub x_t: Tensor<T>,
}

/// `t` uniform over the schedule and standard normal noise, one per row.
pub fn draw_corruption<T: Scalar>(x0: &Tensor<T>, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Corruption<T>, DiffusionError> {
    let n = x0.shape()[0];
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.steps())).collect();
    let noise = rng::normal_tensor(x0.shape().to_vec(), rng);
    let x_t = corrupt_rows(x0, &t, &noise, sched)?;
    Ok(Corruption { t, noise, x_t })
}

fn per_sample_sq<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, DiffusionError> {
    if pred.shape() != target.shape() {
        return Err(DiffusionError::Shape(format!("prediction {:?} vs noise {:?}", pred.shape(), target.shape())));
    }
    let n = T::of(pred.shape()[0] as f64);
    Ok(pred.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
}

/// `mean_batch ‖ε̂ − ε‖²` where `predict` supplies `ε̂` for the drawn corruption.
///
/// The closure sees the true noise, so a test can plug in an oracle.
pub fn dsm_loss_with<T: Scalar>(
    x0: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    predict: impl FnOnce(&Corruption<T>) -> Result<Tensor<T>, DiffusionError>,
) -> Result<T, DiffusionError> {
    if x0.shape()[0] == 0 {
        return Err(DiffusionError::Shape("empty batch".into()));
    }
    let c = draw_corruption(x0, sched, rng)?;
    let pred = predict(&c)?;
    per_sample_sq(&pred, &c.noise)
}

pub fn dsm_loss<T: Scalar>(
    params: &ModelParams<T>,
    x0: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<T, DiffusionError> {
    dsm_loss_with(x0, sched, rng, |c| Ok(score_net_forward(params, &c.x_t, &c.t, cond)?))
}

/// Differentiable DSM loss on bound parameters.
pub fn dsm_loss_graph<'t, T: Scalar>(
    p: &Bound<'t, T>,
    params: &ModelParams<T>,
    x0: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var<'t, T>, DiffusionError> {
    let c = draw_corruption(x0, sched, rng)?;
    let tape = p.tape();
    let pred = denoiser(p, params.arch(), tape.constant(c.x_t), &c.t, cond)?;
    let row = x0.numel() / x0.shape()[0];
    Ok(pred.squared_error(tape.constant(c.noise))?.scale(T::of(row as f64))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight averaging over the run; the returned parameters are the average. 0 returns the last iterate.
    pub ema_decay: f64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self { steps: 5000, batch: 256, lr: 1e-3, seed: 0, ema_decay: 0.0 }
    }
}

/// Trains every parameter of `params` by DSM on rows drawn from `data`.
///
/// Returns the trained parameters and the per-step loss trace.
pub fn pretrain_dsm<T: Scalar>(
    mut params: ModelParams<T>,
    data: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    cfg: &DsmConfig,
) -> Result<(ModelParams<T>, Vec<T>), DiffusionError> {
    let mut r = rng::derive(cfg.seed, "dsm");
    let mut ema = (cfg.ema_decay > 0.0).then(|| EmaState::new(params.tensors(), T::of(cfg.ema_decay))).transpose()?;
    let mut opt = Adam::new(T::of(cfg.lr), params.tensors());
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    let n = data.shape()[0];
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..n)).collect();
        let x0 = data.select_rows(&idx);
        let c = cond.map(|c| c.select_rows(&idx));
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let loss = dsm_loss_graph(&bound, &params, &x0, c.as_ref(), sched, &mut r)?;
        tape.backward(loss)?;
        trace.push(loss.item());
        let grads = bound.grads(&names)?;
        params.step(&mut opt, &grads)?;
        if let Some(e) = ema.as_mut() {
            e.update(params.tensors())?;
        }
    }
    if let Some(e) = ema {
        params = ModelParams::new(params.arch().clone(), e.shadow().clone())?;
    }
    Ok((params, trace))
}
