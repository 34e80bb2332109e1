use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::DegradationError;

/// Square, odd-sized blur kernel stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurKernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self, DegradationError> {
        let k = Self { size, weights };
        k.validate()?;
        Ok(k)
    }

    pub fn identity(size: usize) -> Self {
        Self::delta(size, size / 2, size / 2)
    }

    /// Unit mass at `(i, j)`.
    pub fn delta(size: usize, i: usize, j: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[i * size + j] = 1.0;
        Self { size, weights }
    }

    pub fn box_blur(size: usize) -> Self {
        Self { size, weights: vec![1.0 / (size * size) as f64; size * size] }
    }

    /// Sampled isotropic Gaussian, normalized on its support.
    pub fn gaussian(sigma: f64, size: usize) -> Self {
        let c = (size / 2) as f64;
        let mut weights: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Self { size, weights }
    }

    pub fn validate(&self) -> Result<(), DegradationError> {
        if self.size.is_multiple_of(2) || self.weights.len() != self.size * self.size {
            return Err(DegradationError::Spec(format!("kernel must be odd-sized and square, got {} weights for size {}", self.weights.len(), self.size)));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(DegradationError::Spec("kernel entries must be non-negative".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(DegradationError::Spec(format!("kernel sums to {s}, not 1")));
        }
        Ok(())
    }
}

/// The deterministic part of a degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Operator {
    /// `y = M·x` on flat vectors; `matrix` is row-major `d × d`.
    Linear { dim: usize, matrix: Vec<f64> },
    /// Per-channel convolution with zero padding on `[C, H, W]` patches.
    Blur { kernel: BlurKernel },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub operator: Operator,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
}

impl DegradationSpec {
    /// `scale·I` on `dim`-vectors.
    pub fn contraction(dim: usize, scale: f64, noise: f64) -> Self {
        let matrix = (0..dim * dim).map(|i| if i / dim == i % dim { scale } else { 0.0 }).collect();
        Self { operator: Operator::Linear { dim, matrix }, noise }
    }

    pub fn blur(kernel: BlurKernel, noise: f64) -> Self {
        Self { operator: Operator::Blur { kernel }, noise }
    }

    pub fn validate(&self) -> Result<(), DegradationError> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DegradationError::Spec(format!("noise level {} must be non-negative", self.noise)));
        }
        match &self.operator {
            Operator::Blur { kernel } => kernel.validate(),
            Operator::Linear { dim, matrix } => {
                if *dim == 0 || matrix.len() != dim * dim {
                    return Err(DegradationError::Spec(format!("{} entries for a {dim}×{dim} map", matrix.len())));
                }
                if determinant(matrix, *dim).abs() < 1e-12 {
                    return Err(DegradationError::Spec("linear map is singular".into()));
                }
                Ok(())
            }
        }
    }
}

/// Determinant by partial-pivot elimination.
fn determinant(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        if a[p * n + c] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                a.swap(p * n + k, c * n + k);
            }
            det = -det;
        }
        det *= a[c * n + c];
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
        }
    }
    det
}

/// Same-size 2-D correlation of one plane with zero padding.
pub(crate) fn filter_plane<T: Scalar>(src: &[T], h: usize, w: usize, kernel: &BlurKernel, dst: &mut [T]) {
    let k = kernel.size;
    let r = (k / 2) as isize;
    for i in 0..h {
        for j in 0..w {
            let mut acc = T::zero();
            for a in 0..k {
                let y = i as isize + a as isize - r;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let x = j as isize + b as isize - r;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    acc += T::of(kernel.weights[a * k + b]) * src[y as usize * w + x as usize];
                }
            }
            dst[i * w + j] = acc;
        }
    }
}

/// Applies the operator and adds noise drawn from `rng`.
pub fn degrade_with<T: Scalar>(x: &Tensor<T>, spec: &DegradationSpec, rng: &mut Rng) -> Result<Tensor<T>, DegradationError> {
    spec.validate()?;
    let shape = x.shape().to_vec();
    let mut y = match &spec.operator {
        Operator::Linear { dim, matrix } => {
            if shape.len() != 2 || shape[1] != *dim {
                return Err(DegradationError::Shape(format!("expected [n, {dim}], got {shape:?}")));
            }
            let d = *dim;
            Tensor::from_fn(shape.clone(), |i| {
                let (row, k) = (i / d, i % d);
                (0..d).map(|j| T::of(matrix[k * d + j]) * x.data()[row * d + j]).sum()
            })
        }
        Operator::Blur { kernel } => {
            if shape.len() != 4 {
                return Err(DegradationError::Shape(format!("expected [n, C, H, W], got {shape:?}")));
            }
            let (h, w) = (shape[2], shape[3]);
            let mut out = Tensor::zeros(shape.clone());
            for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
                filter_plane(src, h, w, kernel, dst);
            }
            out
        }
    };
    if spec.noise > 0.0 {
        let eta = T::of(spec.noise);
        for v in y.data_mut() {
            *v += eta * rng::normal::<T>(rng);
        }
    }
    Ok(y)
}

/// `y = k_deg ∗ x + ε` with noise drawn from a stream derived from `seed`.
pub fn degrade<T: Scalar>(x: &Tensor<T>, spec: &DegradationSpec, seed: u64) -> Result<Tensor<T>, DegradationError> {
    degrade_with(x, spec, &mut rng::derive(seed, "degrade"))
}

/// `‖k_a − k_b‖₁` over a shared support.
pub fn kernel_mismatch(a: &BlurKernel, b: &BlurKernel) -> Result<f64, DegradationError> {
    if a.size != b.size || a.weights.len() != b.weights.len() {
        return Err(DegradationError::Support(a.size, b.size));
    }
    Ok(a.weights.iter().zip(&b.weights).map(|(p, q)| (p - q).abs()).sum())
}
