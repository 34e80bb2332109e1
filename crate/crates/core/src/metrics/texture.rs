use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::MetricsError;

fn richness_plane<T: Scalar>(p: &[T], h: usize, w: usize) -> T {
    let four = T::of(4.0);
    let mut acc = T::zero();
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let c = p[i * w + j];
            let lap = p[(i - 1) * w + j] + p[(i + 1) * w + j] + p[i * w + j - 1] + p[i * w + j + 1] - four * c;
            acc += lap.abs();
        }
    }
    acc / T::of(((h - 2) * (w - 2)) as f64)
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize), MetricsError> {
    let n = shape.len();
    if n < 2 {
        return Err(MetricsError::Domain(format!("patch needs two spatial axes, got {shape:?}")));
    }
    let (h, w) = (shape[n - 2], shape[n - 1]);
    if h < 3 || w < 3 {
        return Err(MetricsError::Domain(format!("patch {h}×{w} is smaller than 3×3")));
    }
    Ok((h, w))
}

/// Mean absolute 5-point Laplacian over interior pixels of a single-plane patch.
pub fn texture_richness<T: Scalar>(patch: &Tensor<T>) -> Result<T, MetricsError> {
    let (h, w) = plane_dims(patch.shape())?;
    if patch.numel() != h * w {
        return Err(MetricsError::Domain(format!("expected one plane, got {:?}", patch.shape())));
    }
    Ok(richness_plane(patch.data(), h, w))
}

/// Richness of every patch in a `[B, 1, H, W]` batch.
pub fn texture_richness_batch<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>, MetricsError> {
    let (h, w) = plane_dims(x.shape())?;
    if x.shape().len() != 4 || x.shape()[1] != 1 {
        return Err(MetricsError::Domain(format!("expected [B, 1, H, W], got {:?}", x.shape())));
    }
    Ok(x.data().chunks(h * w).map(|p| richness_plane(p, h, w)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let c = Tensor::full(vec![6, 6], 3.0);
        assert_eq!(texture_richness(&c).unwrap(), 0.0);
        let board = Tensor::from_fn(vec![6, 6], |i| if (i / 6 + i % 6) % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(texture_richness(&board).unwrap(), 8.0);
        let ramp = Tensor::from_fn(vec![5, 7], |i| 0.3 * (i / 7) as f64 - 1.1 * (i % 7) as f64 + 2.0);
        assert!(texture_richness(&ramp).unwrap() < 1e-12);
        assert!(texture_richness(&Tensor::<f64>::zeros(vec![2, 5])).is_err());
    }

    proptest! {
        #[test]
        fn shift_invariant_and_homogeneous(data in prop::collection::vec(-2.0f64..2.0, 25), shift in -5.0f64..5.0, k in 0.0f64..4.0) {
            let p = Tensor::new(vec![5, 5], data).unwrap();
            let base = texture_richness(&p).unwrap();
            let shifted = texture_richness(&p.map(|v| v + shift)).unwrap();
            let scaled = texture_richness(&p.map(|v| k * v)).unwrap();
            prop_assert!((base - shifted).abs() < 1e-9);
            prop_assert!((scaled - k * base).abs() < 1e-9);
        }
    }
}
