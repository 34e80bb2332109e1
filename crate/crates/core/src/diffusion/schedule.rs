use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::DiffusionError;

/// Discrete variance-preserving schedule: `ᾱ[t] = Π_{i≤t} (1 − β[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas, each in (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() {
            return Err(DiffusionError::Schedule("at least one step is required".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::Schedule(format!("beta[{i}] = {b} is not in (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.alpha_bar.get(t).copied().ok_or(DiffusionError::Time { t, steps: self.steps() })
    }

    /// Index whose `ᾱ` is closest to `target`.
    pub fn time_for_alpha_bar(&self, target: f64) -> usize {
        let mut best = 0;
        for (t, a) in self.alpha_bar.iter().enumerate() {
            if (a - target).abs() < (self.alpha_bar[best] - target).abs() {
                best = t;
            }
        }
        best
    }
}

/// Linear β from `beta_start` to `beta_end` over `steps` indices.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Schedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
    };
    NoiseSchedule::from_betas(beta)
}

/// `x_t = √ᾱ·x0 + √(1−ᾱ)·noise`, with one time index per row of `x0`.
pub(crate) fn corrupt_rows<T: Scalar>(
    x0: &Tensor<T>,
    t: &[usize],
    noise: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>, DiffusionError> {
    if x0.shape() != noise.shape() || x0.shape()[0] != t.len() {
        return Err(DiffusionError::Shape(format!(
            "x0 {:?}, noise {:?}, {} time indices",
            x0.shape(),
            noise.shape(),
            t.len()
        )));
    }
    let row = x0.numel() / t.len();
    let mut coef = Vec::with_capacity(t.len());
    for &ti in t {
        let a = sched.alpha_bar(ti)?;
        coef.push((T::of(a.sqrt()), T::of((1.0 - a).sqrt())));
    }
    Ok(Tensor::from_fn(x0.shape().to_vec(), |i| {
        let (s, n) = coef[i / row];
        s * x0.data()[i] + n * noise.data()[i]
    }))
}

/// Forward corruption of a whole batch at a single time index.
pub fn forward_corrupt<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>, DiffusionError> {
    corrupt_rows(x0, &vec![t; x0.shape()[0]], noise, sched)
}
