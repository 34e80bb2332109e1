use crate::autodiff::{Tensor, Var};
use crate::models::{denoiser, score_net_forward, Architecture, Bound, ModelParams};
use crate::rng;
use crate::scalar::Scalar;

use super::{DiffusionError, NoiseSchedule};

/// Learned score `s = −ε̂ / √(1−ᾱ(t))` at a single time index.
pub fn score<T: Scalar>(
    params: &ModelParams<T>,
    x_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>, DiffusionError> {
    let a = sched.alpha_bar(t)?;
    let eps = score_net_forward(params, x_t, &vec![t; x_t.shape()[0]], cond)?;
    let k = T::of(-1.0 / (1.0 - a).sqrt());
    Ok(eps.map(|v| k * v))
}

/// `x̂0 = (x_t + (1−ᾱ)·s) / √ᾱ` for a given score.
pub fn restore_from_score<T: Scalar>(x_t: &Tensor<T>, s: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>, DiffusionError> {
    let (k, r) = (T::of(1.0 - alpha_bar), T::of(alpha_bar.sqrt()));
    x_t.zip_map(s, |x, s| (x + k * s) / r).map_err(|e| DiffusionError::Shape(e.to_string()))
}

pub fn one_step_restore<T: Scalar>(
    params: &ModelParams<T>,
    x_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>, DiffusionError> {
    let s = score(params, x_t, t, sched, cond)?;
    restore_from_score(x_t, &s, sched.alpha_bar(t)?)
}

/// One-step restoration built on the tape, written as `(x_t − √(1−ᾱ)·ε̂) / √ᾱ`.
pub fn one_step_graph<'t, T: Scalar>(
    p: &Bound<'t, T>,
    arch: &Architecture,
    x_t: Var<'t, T>,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<&Tensor<T>>,
) -> Result<Var<'t, T>, DiffusionError> {
    let a = sched.alpha_bar(t)?;
    let eps = denoiser(p, arch, x_t, &vec![t; x_t.shape()[0]], cond)?;
    let num = x_t.sub(eps.scale(T::of((1.0 - a).sqrt()))?)?;
    Ok(num.scale(T::of(1.0 / a.sqrt()))?)
}

/// DDPM ancestral sampling from pure noise with `σ_t² = β_t`.
pub fn ancestral_sample<T: Scalar>(
    params: &ModelParams<T>,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>, DiffusionError> {
    let mut r = rng::derive(seed, "ancestral");
    let mut shape = vec![n];
    shape.extend(params.arch().input_shape());
    let mut x = rng::normal_tensor(shape.clone(), &mut r);
    for t in (0..sched.steps()).rev() {
        let (beta, a) = (sched.beta()[t], sched.alpha_bar(t)?);
        let eps = score_net_forward(params, &x, &vec![t; n], cond)?;
        let k = T::of(beta / (1.0 - a).sqrt());
        let inv = T::of(1.0 / (1.0 - beta).sqrt());
        let sigma = T::of(beta.sqrt());
        let z = if t > 0 { rng::normal_tensor(shape.clone(), &mut r) } else { Tensor::zeros(shape.clone()) };
        x = Tensor::from_fn(shape.clone(), |i| inv * (x.data()[i] - k * eps.data()[i]) + sigma * z.data()[i]);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn arithmetic_example() {
        let x = Tensor::<f64>::new(vec![1, 1], vec![1.0]).unwrap();
        let s = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        assert!((restore_from_score(&x, &s, 0.25).unwrap().item() - 0.5).abs() < 1e-15);
        assert_eq!(restore_from_score(&x, &s, 1.0).unwrap(), x);
    }

    #[test]
    fn gaussian_score_gives_posterior_mean() {
        let sched = make_schedule(200, 1e-4, 0.04).unwrap();
        let mut r = rng::seeded(8);
        for t in [0, 17, 100, 199] {
            let x = rng::normal_tensor(vec![5, 3], &mut r);
            let s = x.map(|v: f64| -v);
            let a = sched.alpha_bar(t).unwrap();
            let out = restore_from_score(&x, &s, a).unwrap();
            assert!(out.max_abs_diff(&x.map(|v| a.sqrt() * v)) < 1e-12);
        }
    }

    #[test]
    fn graph_matches_tensor_path() {
        use crate::autodiff::Tape;
        let arch = Architecture::MlpDenoiser { data_dim: 2, hidden: vec![8], time_dim: 4, cond_dim: 0 };
        let params = ModelParams::<f64>::init(arch.clone(), &mut rng::seeded(9)).unwrap();
        let sched = make_schedule(40, 1e-3, 0.05).unwrap();
        let x = rng::normal_tensor(vec![6, 2], &mut rng::seeded(10));
        let a = one_step_restore(&params, &x, 11, &sched, None).unwrap();
        let tape = Tape::new();
        let b = one_step_graph(&params.bind_frozen(&tape), &arch, tape.constant(x), 11, &sched, None).unwrap();
        assert!(a.max_abs_diff(&b.tensor()) < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let arch = Architecture::MlpDenoiser { data_dim: 2, hidden: vec![8], time_dim: 4, cond_dim: 0 };
        let params = ModelParams::<f64>::init(arch, &mut rng::seeded(11)).unwrap();
        let sched = make_schedule(30, 1e-3, 0.05).unwrap();
        let a = ancestral_sample(&params, &sched, 20, 5, None).unwrap();
        let b = ancestral_sample(&params, &sched, 20, 5, None).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_ne!(a, ancestral_sample(&params, &sched, 20, 6, None).unwrap());
    }
}
