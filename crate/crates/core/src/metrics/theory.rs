use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::models::{Bound, ModelError, ModelParams, TensorMap};
use crate::rng;
use crate::scalar::Scalar;

use super::MetricsError;

/// User-supplied constants for the step-count calculator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConstants {
    /// Smoothness constant.
    pub l: f64,
    /// Strong-convexity constant.
    pub mu: f64,
    /// Generator step size.
    pub eta: f64,
    pub eps0: f64,
    pub delta_tar: f64,
    pub c2: f64,
    pub l_j: f64,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let named = [
            ("l", self.l),
            ("mu", self.mu),
            ("eta", self.eta),
            ("eps0", self.eps0),
            ("delta_tar", self.delta_tar),
            ("c2", self.c2),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(MetricsError::Domain(format!("{name} = {v} must be positive")));
        }
        if !(self.l_j >= 0.0 && self.l_j.is_finite()) {
            return Err(MetricsError::Domain(format!("l_j = {} must be non-negative", self.l_j)));
        }
        if self.eta * self.mu >= 1.0 {
            return Err(MetricsError::Domain(format!("eta·mu = {} must be below 1", self.eta * self.mu)));
        }
        Ok(())
    }
}

/// `√2 · L_J · ε0`.
pub fn lemma_bound(l_j: f64, eps0: f64) -> Result<f64, MetricsError> {
    if !(l_j >= 0.0 && eps0 >= 0.0) {
        return Err(MetricsError::Domain(format!("L_J = {l_j} and eps0 = {eps0} must be non-negative")));
    }
    Ok(std::f64::consts::SQRT_2 * l_j * eps0)
}

/// Iterations needed for the loss gap to fall below `δ_tar`:
/// `ln(C2·ε0²/δ_tar) / ln(1/(1−ημ))`, or 0 when the start is already within target.
pub fn predicted_steps(tc: &TheoryConstants) -> Result<f64, MetricsError> {
    tc.validate()?;
    let ratio = tc.c2 * tc.eps0 * tc.eps0 / tc.delta_tar;
    if ratio <= 1.0 {
        return Ok(0.0);
    }
    Ok(ratio.ln() / -(-tc.eta * tc.mu).ln_1p())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate<T> {
    /// Largest spectral norm over the batch.
    pub value: T,
    pub per_sample: Vec<T>,
    /// False when some sample's last power step still moved by more than 1e-3 relative.
    pub converged: bool,
}

/// Differentiable map from bound parameters and an input row to an output.
pub type Forward<'a, T> = dyn for<'t> Fn(&Bound<'t, T>, Var<'t, T>) -> Result<Var<'t, T>, ModelError> + 'a;

fn perturbed<T: Scalar>(params: &ModelParams<T>, dir: &TensorMap<T>, h: T) -> Result<ModelParams<T>, MetricsError> {
    let mut out = params.clone();
    for (name, v) in dir {
        let moved = params.get(name)?.zip_map(v, |p, d| p + h * d).map_err(ModelError::from)?;
        out.set(name, moved)?;
    }
    Ok(out)
}

fn eval_output<T: Scalar>(params: &ModelParams<T>, y: &Tensor<T>, f: &Forward<'_, T>) -> Result<Tensor<T>, MetricsError> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    Ok(f(&bound, tape.constant(y.clone()))?.tensor())
}

/// Spectral norm of `∂ f(θ; y) / ∂θ` restricted to the selected parameters,
/// by power iteration on `JᵀJ`.
///
/// `J·v` uses central differences along `v`; `Jᵀ·u` is one reverse pass.
pub fn jacobian_norm_estimate<T: Scalar>(
    params: &ModelParams<T>,
    select: impl Fn(&str) -> bool,
    ys: &Tensor<T>,
    f: &Forward<'_, T>,
    iters: usize,
    seed: u64,
) -> Result<JacobianEstimate<T>, MetricsError> {
    let names: Vec<String> = params.names().filter(|n| select(n)).map(String::from).collect();
    if names.is_empty() {
        return Err(MetricsError::Empty("selected parameters"));
    }
    let mut r = rng::derive(seed, "jacobian");
    let h = T::of(1e-5);
    let mut per_sample = Vec::with_capacity(ys.shape()[0]);
    let mut converged = true;
    for i in 0..ys.shape()[0] {
        let y = ys.select_rows(&[i]);
        let mut v: TensorMap<T> =
            names.iter().map(|n| (n.clone(), rng::normal_tensor(params.get(n).unwrap().shape().to_vec(), &mut r))).collect();
        normalize(&mut v);
        let (mut lambda, mut prev) = (T::zero(), T::zero());
        for _ in 0..iters {
            let plus = eval_output(&perturbed(params, &v, h)?, &y, f)?;
            let minus = eval_output(&perturbed(params, &v, -h)?, &y, f)?;
            let jv = plus.zip_map(&minus, |a, b| (a - b) / (h + h)).map_err(ModelError::from)?;
            let tape = Tape::new();
            let bound = params.bind(&tape, |n| select(n));
            let out = f(&bound, tape.constant(y.clone()))?;
            let probe = out.mul(tape.constant(jv)).map_err(ModelError::from)?.sum().map_err(ModelError::from)?;
            tape.backward(probe).map_err(ModelError::from)?;
            let mut w = bound.grads(&names)?;
            prev = lambda;
            lambda = normalize(&mut w);
            if lambda == T::zero() {
                break;
            }
            v = w;
        }
        if lambda > T::zero() && (lambda - prev).abs() > T::of(1e-3) * lambda {
            converged = false;
        }
        per_sample.push(lambda.sqrt());
    }
    let value = per_sample.iter().copied().fold(T::zero(), T::max);
    Ok(JacobianEstimate { value, per_sample, converged })
}

fn normalize<T: Scalar>(v: &mut TensorMap<T>) -> T {
    let norm = v.values().map(Tensor::sq_norm).sum::<T>().sqrt();
    if norm > T::zero() {
        for t in v.values_mut() {
            *t = t.map(|x| x / norm);
        }
    }
    norm
}
