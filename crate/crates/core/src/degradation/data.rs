use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::GmmSpec;
use crate::metrics::texture_richness;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::kernel::{filter_plane, BlurKernel};
use super::DegradationError;

/// Procedural single-channel texture patches of controlled richness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub size: usize,
    /// Inclusive range the per-patch richness target is drawn from.
    pub richness: [f64; 2],
}

impl TextureSpec {
    pub fn validate(&self) -> Result<(), DegradationError> {
        let [lo, hi] = self.richness;
        if self.size < 3 {
            return Err(DegradationError::Spec(format!("patch size {} below 3", self.size)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DegradationError::Spec(format!("richness range [{lo}, {hi}] must be positive and ordered")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Gmm { gmm: GmmSpec },
    Textures { textures: TextureSpec },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DegradationError> {
        match self {
            Self::Gmm { gmm } => gmm.validate().map_err(|e| DegradationError::Spec(e.to_string())),
            Self::Textures { textures } => textures.validate(),
        }
    }

    /// Per-sample shape without the batch axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Self::Gmm { gmm } => vec![gmm.dim()],
            Self::Textures { textures } => vec![1, textures.size, textures.size],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub x: Tensor<T>,
    /// Mixture component per sample (point data).
    pub labels: Option<Vec<usize>>,
    /// Laplacian statistic per sample (patches).
    pub richness: Option<Vec<T>>,
}

/// `n` i.i.d. samples, fully determined by `seed`.
pub fn gen_dataset<T: Scalar>(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Dataset<T>, DegradationError> {
    spec.validate()?;
    if n == 0 {
        return Err(DegradationError::Spec("n must be at least 1".into()));
    }
    let mut r = rng::derive(seed, "dataset");
    match spec {
        DatasetSpec::Gmm { gmm } => {
            let (x, labels) = gmm.sample(n, &mut r);
            Ok(Dataset { x, labels: Some(labels), richness: None })
        }
        DatasetSpec::Textures { textures } => {
            let s = textures.size;
            let mut data = Vec::with_capacity(n * s * s);
            let mut richness = Vec::with_capacity(n);
            for _ in 0..n {
                let [lo, hi] = textures.richness;
                let target = if lo == hi { lo } else { rng::uniform(lo, hi, &mut r) };
                let patch = texture_patch(s, target, &mut r);
                richness.push(T::of(rich(&patch, s)));
                data.extend(patch.into_iter().map(T::of));
            }
            let x = Tensor::new(vec![n, 1, s, s], data).expect("consistent size");
            Ok(Dataset { x, labels: None, richness: Some(richness) })
        }
    }
}

fn rich(p: &[f64], s: usize) -> f64 {
    texture_richness(&Tensor::new(vec![s, s], p.to_vec()).expect("plane")).expect("size checked")
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - m) / sd);
}

/// Smooth unit-variance field plus `a` times a unit-variance high-pass field,
/// with `a` chosen so the patch richness equals `target`.
fn texture_patch(s: usize, target: f64, r: &mut Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..s * s).map(|_| rng::normal(r)).collect();
    let mut smooth = vec![0.0; s * s];
    filter_plane(&white, s, s, &BlurKernel::gaussian(2.0, 7), &mut smooth);
    standardize(&mut smooth);
    let white: Vec<f64> = (0..s * s).map(|_| rng::normal(r)).collect();
    let mut low = vec![0.0; s * s];
    filter_plane(&white, s, s, &BlurKernel::gaussian(1.0, 5), &mut low);
    let mut high: Vec<f64> = white.iter().zip(&low).map(|(w, l)| w - l).collect();
    standardize(&mut high);

    // the smooth field alone is far below any useful target, and richness is
    // convex in the amplitude, so the crossing is unique
    let mix = |a: f64| -> Vec<f64> { smooth.iter().zip(&high).map(|(p, q)| p + a * q).collect() };
    let f = |a: f64| rich(&mix(a), s) - target;
    if f(0.0) >= 0.0 {
        return mix(0.0);
    }
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    mix(hi)
}
