use crate::scalar::Scalar;

use super::{AutodiffError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// `f` builds a scalar from the variable it is handed. Returns the maximum over
/// coordinates of `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<T, E, F>(f: F, x: &Tensor<T>, h: T) -> Result<T, E>
where
    T: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>, E>,
{
    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&tape, v)?;
        tape.backward(out)?;
        v.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |probe: Tensor<T>| -> Result<T, E> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        Ok(f(&tape, v)?.item())
    };
    let two_h = h + h;
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / two_h;
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check::<_, AutodiffError, _>(|_, v| v.mul(v)?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn plain_sum_is_exact() {
        // dyadic points and step keep x ± h and the sums exact
        let x = Tensor::new(vec![4], vec![0.5, -7.0, 3.5, 1.0 / 128.0]).unwrap();
        let err = grad_check::<_, AutodiffError, _>(|_, v| v.sum(), &x, 1.0 / 65536.0).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn smooth_composites_match_finite_differences(xs in prop::collection::vec(-2.0f64..2.0, 1..8)) {
                let x = Tensor::new(vec![xs.len()], xs).unwrap();
                let err = grad_check::<_, AutodiffError, _>(
                    |_, v| v.mul(v)?.tanh()?.add(v.silu()?)?.add(v.softplus()?.exp()?)?.mean(),
                    &x,
                    1e-5,
                )
                .unwrap();
                prop_assert!(err < 1e-6, "{}", err);
            }

            #[test]
            fn gradient_of_a_linear_form_is_its_coefficients(pairs in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 1..16)) {
                let (a, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let n = a.len();
                let tape = Tape::new();
                let v = tape.param(Tensor::new(vec![n], x).unwrap());
                let out = tape.constant(Tensor::new(vec![n], a.clone()).unwrap()).mul(v).unwrap().sum().unwrap();
                tape.backward(out).unwrap();
                let g = v.grad().unwrap();
                prop_assert_eq!(g.data(), &a[..]);
            }
        }
    }
}
