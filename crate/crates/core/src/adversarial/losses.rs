use crate::autodiff::{softplus, Tape, Tensor, Var};
use crate::models::{critic, Bound, ModelParams};
use crate::scalar::Scalar;

use super::{AdversarialError, Generator, TrainConfig};

/// Objective values for one paired batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses<T> {
    pub loss_d: T,
    pub loss_g: T,
    /// `−E log D(R(y))`.
    pub adv: T,
    pub mse: T,
    /// Squared distance between critic features of output and target.
    pub perc: T,
    pub logit_real_mean: T,
    pub logit_fake_mean: T,
}

/// `−[E log σ(l_real) + E log(1 − σ(l_fake))]`.
pub fn d_loss_from_logits<T: Scalar>(real: &[T], fake: &[T]) -> T {
    let mean = |v: &[T], sign: T| v.iter().map(|&l| softplus(sign * l)).sum::<T>() / T::of(v.len() as f64);
    mean(real, -T::one()) + mean(fake, T::one())
}

/// Non-saturating generator term `−E log σ(l_fake)`.
pub fn g_adv_from_logits<T: Scalar>(fake: &[T]) -> T {
    fake.iter().map(|&l| softplus(-l)).sum::<T>() / T::of(fake.len() as f64)
}

/// Critic loss on the tape; `fake` should already be detached from the generator.
pub(crate) fn d_loss_graph<'t, T: Scalar>(
    d: &Bound<'t, T>,
    disc: &ModelParams<T>,
    real: Var<'t, T>,
    fake: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>), AdversarialError> {
    let (lr, _) = critic(d, disc.arch(), real)?;
    let (lf, _) = critic(d, disc.arch(), fake)?;
    let loss = lr.scale(-T::one())?.softplus()?.mean()?.add(lf.softplus()?.mean()?)?;
    Ok((loss, lr, lf))
}

/// Generator terms on the tape: `(total, adv, mse, perc, fake logits)`.
pub(crate) fn g_loss_graph<'t, T: Scalar>(
    d: &Bound<'t, T>,
    disc: &ModelParams<T>,
    fake: Var<'t, T>,
    real: Var<'t, T>,
    cfg: &TrainConfig,
) -> Result<[Var<'t, T>; 5], AdversarialError> {
    let (lf, ff) = critic(d, disc.arch(), fake)?;
    let (_, fr) = critic(d, disc.arch(), real)?;
    let fr = d.tape().constant(fr.tensor());
    let adv = lf.scale(-T::one())?.softplus()?.mean()?;
    let mse = fake.squared_error(real)?;
    let perc = ff.squared_error(fr)?;
    let total = adv
        .scale(T::of(cfg.lambda_adv))?
        .add(mse.scale(T::of(cfg.lambda_mse))?)?
        .add(perc.scale(T::of(cfg.lambda_perc))?)?;
    Ok([total, adv, mse, perc, lf])
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::of(v.len() as f64)
}

/// Evaluates both objectives without updating anything.
pub fn gan_losses<T: Scalar>(
    gen: &Generator<T>,
    disc: &ModelParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    cfg: &TrainConfig,
) -> Result<GanLosses<T>, AdversarialError> {
    if x.shape()[0] != y.shape()[0] {
        return Err(AdversarialError::Shape(format!("{} clean rows vs {} degraded", x.shape()[0], y.shape()[0])));
    }
    let tape = Tape::new();
    let g = gen.bind(&tape, false);
    let d = disc.bind_frozen(&tape);
    let fake = gen.graph(&g, tape.constant(y.clone()), cond)?;
    let real = tape.constant(x.clone());
    let (loss_d, lr, lf) = d_loss_graph(&d, disc, real, fake)?;
    let [total, adv, mse, perc, _] = g_loss_graph(&d, disc, fake, real, cfg)?;
    Ok(GanLosses {
        loss_d: loss_d.item(),
        loss_g: total.item(),
        adv: adv.item(),
        mse: mse.item(),
        perc: perc.item(),
        logit_real_mean: mean(&lr.data()),
        logit_fake_mean: mean(&lf.data()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undecided_critic() {
        let z = [0.0f64; 5];
        assert!((g_adv_from_logits(&z) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((d_loss_from_logits(&z, &z) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn hand_set_logits() {
        // softplus(−2) + softplus(−1), each from ln(1 + e^x)
        let oracle = (1.0 + (-2.0f64).exp()).ln() + (1.0 + (-1.0f64).exp()).ln();
        let got = d_loss_from_logits(&[2.0f64], &[-1.0]);
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.4402).abs() < 1e-4);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let v = d_loss_from_logits(&[-800.0f64], &[800.0]);
        assert!((v - 1600.0).abs() < 1e-9);
    }
}
