use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::models::ModelParams;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::{score, DiffusionError, NoiseSchedule};

/// Isotropic Gaussian mixture with a shared component variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    pub var: f64,
    pub weights: Vec<f64>,
}

impl GmmSpec {
    pub fn new(means: Vec<Vec<f64>>, var: f64, weights: Vec<f64>) -> Result<Self, DiffusionError> {
        let g = Self { means, var, weights };
        g.validate()?;
        Ok(g)
    }

    /// `k` equally weighted components evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { means, var: std * std, weights: vec![1.0 / k as f64; k] }
    }

    /// Standard normal in `d` dimensions.
    pub fn standard_normal(d: usize) -> Self {
        Self { means: vec![vec![0.0; d]], var: 1.0, weights: vec![1.0] }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::Mixture(m));
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return bad(format!("{} means but {} weights", self.means.len(), self.weights.len()));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return bad("means must share one positive dimension".into());
        }
        if !(self.var > 0.0 && self.var.is_finite()) {
            return bad(format!("variance {} must be positive", self.var));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("weights must lie on the simplex".into());
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Draws `n` points and the component each came from.
    pub fn sample<T: Scalar>(&self, n: usize, rng: &mut Rng) -> (Tensor<T>, Vec<usize>) {
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let d = self.dim();
        let std = self.var.sqrt();
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = pick.sample(rng);
            labels.push(k);
            for j in 0..d {
                data.push(T::of(self.means[k][j] + std * rng::normal::<f64>(rng)));
            }
        }
        (Tensor::new(vec![n, d], data).expect("consistent size"), labels)
    }

    /// The mixture convolved with `N(0, σ²I)`.
    pub fn smoothed(&self, sigma: f64) -> Self {
        Self { var: self.var + sigma * sigma, ..self.clone() }
    }

    /// Law of `√ᾱ·x0 + √(1−ᾱ)·ε` for `x0` drawn from this mixture.
    pub fn vp_marginal(&self, alpha_bar: f64) -> Self {
        let s = alpha_bar.sqrt();
        Self {
            means: self.means.iter().map(|m| m.iter().map(|v| s * v).collect()).collect(),
            var: alpha_bar * self.var + (1.0 - alpha_bar),
            weights: self.weights.clone(),
        }
    }

    /// Gradient of the log density at one point.
    fn score_at(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, &w)| {
                let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                if w > 0.0 { w.ln() - d2 / (2.0 * self.var) } else { f64::NEG_INFINITY }
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        let mut out = vec![0.0; x.len()];
        for (m, l) in self.means.iter().zip(&logits) {
            let r = (l - top).exp() / z;
            for j in 0..x.len() {
                out[j] += r * (m[j] - x[j]) / self.var;
            }
        }
        out
    }
}

/// Exact `∇ log (p_gmm ∗ N(0, σ²I))` at every row of `x`.
pub fn analytic_gmm_score<T: Scalar>(gmm: &GmmSpec, sigma: f64, x: &Tensor<T>) -> Result<Tensor<T>, DiffusionError> {
    let d = gmm.dim();
    if x.shape().len() != 2 || x.shape()[1] != d {
        return Err(DiffusionError::Shape(format!("expected [n, {d}], got {:?}", x.shape())));
    }
    let g = gmm.smoothed(sigma);
    let mut out = Vec::with_capacity(x.numel());
    let mut row = vec![0.0; d];
    for i in 0..x.shape()[0] {
        for (r, v) in row.iter_mut().zip(x.row(i)) {
            *r = v.f64();
        }
        out.extend(g.score_at(&row).into_iter().map(T::of));
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("same size"))
}

/// Root-mean squared distance between `score_fn` and the exact marginal score
/// of the corrupted mixture, pooled over `n` samples at each listed time.
pub fn score_error_with<T: Scalar>(
    gmm: &GmmSpec,
    sched: &NoiseSchedule,
    ts: &[usize],
    n: usize,
    seed: u64,
    mut score_fn: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>, DiffusionError>,
) -> Result<f64, DiffusionError> {
    if n == 0 || ts.is_empty() {
        return Err(DiffusionError::Shape("score error needs samples and times".into()));
    }
    let mut r = rng::derive(seed, "score-error");
    let mut total = 0.0;
    for &t in ts {
        let a = sched.alpha_bar(t)?;
        let (x0, _) = gmm.sample::<T>(n, &mut r);
        let noise = rng::normal_tensor(x0.shape().to_vec(), &mut r);
        let x_t = super::forward_corrupt(&x0, t, &noise, sched)?;
        let truth = analytic_gmm_score(&gmm.vp_marginal(a), 0.0, &x_t)?;
        let learned = score_fn(&x_t, t)?;
        total += learned.zip_map(&truth, |p, q| (p - q) * (p - q)).map_err(|e| DiffusionError::Shape(e.to_string()))?.data().iter().map(|v| v.f64()).sum::<f64>();
    }
    Ok((total / (n * ts.len()) as f64).sqrt())
}

/// Score error of a trained noise predictor.
pub fn score_error<T: Scalar>(
    params: &ModelParams<T>,
    gmm: &GmmSpec,
    sched: &NoiseSchedule,
    ts: &[usize],
    n: usize,
    seed: u64,
) -> Result<f64, DiffusionError> {
    score_error_with(gmm, sched, ts, n, seed, |x, t| score(params, x, t, sched, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn gaussian_smoothing_closed_form() {
        let g = GmmSpec::standard_normal(2);
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.3, 0.0]).unwrap();
        let s = analytic_gmm_score(&g, 0.5, &x).unwrap();
        let expect = x.map(|v: f64| -v / 1.25);
        assert!(s.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let g = GmmSpec::new(vec![vec![-1.5], vec![1.5]], 0.2, vec![0.5, 0.5]).unwrap();
        let s = analytic_gmm_score(&g, 0.1, &Tensor::<f64>::zeros(vec![1, 1])).unwrap();
        assert_eq!(s.item(), 0.0);
    }

    #[test]
    fn stationary_at_isolated_mode() {
        let g = GmmSpec::ring(8, 2.0, 1e-3);
        let at = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let s = analytic_gmm_score(&g, 0.0, &at).unwrap();
        assert!(s.data().iter().all(|v: &f64| v.abs() < 1e-9), "{s:?}");
    }

    #[test]
    fn far_points_do_not_overflow() {
        let g = GmmSpec::ring(8, 2.0, 0.01);
        let s = analytic_gmm_score(&g, 0.0, &Tensor::new(vec![1, 2], vec![40.0, -30.0]).unwrap()).unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn oracle_score_has_zero_error() {
        let g = GmmSpec::ring(8, 2.0, 0.05);
        let sched = make_schedule(200, 1e-4, 0.04).unwrap();
        let err = score_error_with::<f64>(&g, &sched, &[10, 60, 150], 200, 1, |x, t| {
            analytic_gmm_score(&g.vp_marginal(sched.alpha_bar(t)?), 0.0, x)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GmmSpec::new(vec![vec![0.0]], 0.0, vec![1.0]).is_err());
        assert!(GmmSpec::new(vec![vec![0.0], vec![1.0]], 1.0, vec![0.3, 0.3]).is_err());
        assert!(GmmSpec::new(vec![vec![0.0], vec![1.0, 2.0]], 1.0, vec![0.5, 0.5]).is_err());
    }
}
