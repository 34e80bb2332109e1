use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::{Architecture, Bound, ModelError, ModelParams};

type Result<T> = std::result::Result<T, ModelError>;

/// Sinusoidal embedding of discrete time indices, `[B, dim]`.
pub fn time_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(vec![t.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half;
        let freq = (-(1_000f64).ln() * k as f64 / half as f64).exp();
        let arg = t[row] as f64 * freq;
        T::of(if col < half { arg.sin() } else { arg.cos() })
    })
}

fn batch_of<T: Scalar>(x: Var<'_, T>, arch: &Architecture) -> Result<usize> {
    let shape = x.shape();
    let want = arch.input_shape();
    if shape.len() != want.len() + 1 || shape[1..] != want[..] {
        return Err(ModelError::Input { expected: want, got: shape });
    }
    Ok(shape[0])
}

/// `x · Wᵀ + b` for a `[B, in]` input.
fn linear<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.weight(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let rows = x.shape()[0];
    let out = x.matmul(w.transpose()?)?;
    Ok(out.add(broadcast_rows(b, rows)?)?)
}

/// Repeats a `[n]` vector into `[rows, n]` through a ones-column product.
fn broadcast_rows<'t, T: Scalar>(v: Var<'t, T>, rows: usize) -> Result<Var<'t, T>> {
    let n = v.shape().iter().product();
    let ones = v.tape().constant(Tensor::ones(vec![rows, 1]));
    Ok(ones.matmul(v.reshape(&[1, n])?)?)
}

/// Adds a per-sample, per-channel offset `[B, C]` to a `[B, C, H, W]` map.
fn add_channel_offset<'t, T: Scalar>(h: Var<'t, T>, offset: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = h.shape();
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let ones = h.tape().constant(Tensor::ones(vec![1, hw]));
    let planes = offset.reshape(&[b * c, 1])?.matmul(ones)?.reshape(&shape)?;
    Ok(h.add(planes)?)
}

/// Mean over the spatial axes, `[B, C, H, W] → [B, C]`.
fn global_mean<'t, T: Scalar>(h: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = h.shape();
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let avg = h.tape().constant(Tensor::full(vec![hw, 1], T::one() / T::of(hw as f64)));
    Ok(h.reshape(&[b * c, hw])?.matmul(avg)?.reshape(&[b, c])?)
}

fn conv<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>, kernel: usize) -> Result<Var<'t, T>> {
    let w = p.weight(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(x.conv2d(w, Some(b), kernel / 2)?)
}

/// Conditioning values broadcast to constant `[B, k, H, W]` planes.
fn cond_planes<T: Scalar>(cond: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, k) = (cond.shape()[0], cond.shape()[1]);
    Tensor::from_fn(vec![b, k, h, w], |i| cond.data()[i / (h * w)])
}

fn check_cond<T: Scalar>(cond: Option<&Tensor<T>>, batch: usize, dim: usize) -> Result<()> {
    if let Some(c) = cond {
        if c.shape() != [batch, dim] {
            return Err(ModelError::Input { expected: vec![batch, dim], got: c.shape().to_vec() });
        }
    }
    Ok(())
}

/// Noise prediction `ε̂(x, t, cond)` in-graph.
///
/// `t` holds one time index per row. A missing `cond` behaves exactly like an
/// all-zero conditioning input.
pub fn denoiser<'t, T: Scalar>(
    p: &Bound<'t, T>,
    arch: &Architecture,
    x: Var<'t, T>,
    t: &[usize],
    cond: Option<&Tensor<T>>,
) -> Result<Var<'t, T>> {
    let tape = p.tape();
    let batch = batch_of(x, arch)?;
    if t.len() != batch {
        return Err(ModelError::Input { expected: vec![batch], got: vec![t.len()] });
    }
    let cond = if arch.cond_dim() > 0 { cond } else { None };
    check_cond(cond, batch, arch.cond_dim())?;
    match arch {
        Architecture::MlpDenoiser { hidden, time_dim, .. } => {
            let temb = tape.constant(time_embedding(t, *time_dim));
            let mut h = linear(p, "l0", tape.concat(&[x, temb], 1)?)?;
            if let Some(c) = cond {
                let cw = p.get("l0.cond")?;
                h = h.add(tape.constant(c.clone()).matmul(cw.transpose()?)?)?;
            }
            h = h.silu()?;
            for l in 1..hidden.len() {
                h = linear(p, &format!("l{l}"), h)?.silu()?;
            }
            linear(p, &format!("l{}", hidden.len()), h)
        }
        Architecture::ConvDenoiser { hidden, kernel, time_dim, height, width, .. } => {
            let temb = tape.constant(time_embedding(t, *time_dim));
            let mut h = x;
            for l in 0..hidden.len() {
                h = conv(p, &format!("c{l}"), h, *kernel)?;
                if l == 0 {
                    if let Some(c) = cond {
                        let planes = tape.constant(cond_planes(c, *height, *width));
                        h = h.add(planes.conv2d(p.get("c0.cond")?, None, kernel / 2)?)?;
                    }
                }
                let offset = temb.matmul(p.get(&format!("t{l}.weight"))?.transpose()?)?;
                h = add_channel_offset(h, offset)?.silu()?;
            }
            conv(p, &format!("c{}", hidden.len()), h, *kernel)
        }
        other => Err(ModelError::Descriptor(format!("{other:?} is not a denoiser"))),
    }
}

/// Critic logit `[B, 1]` and penultimate features `[B, F]`.
pub fn critic<'t, T: Scalar>(p: &Bound<'t, T>, arch: &Architecture, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    batch_of(x, arch)?;
    let features = match arch {
        Architecture::MlpCritic { hidden, .. } => {
            let mut h = x;
            for l in 0..hidden.len() {
                h = linear(p, &format!("l{l}"), h)?.silu()?;
            }
            h
        }
        Architecture::ConvCritic { hidden, kernel, .. } => {
            let mut h = x;
            for l in 0..hidden.len() {
                h = conv(p, &format!("c{l}"), h, *kernel)?.silu()?;
            }
            global_mean(h)?
        }
        other => return Err(ModelError::Descriptor(format!("{other:?} is not a critic"))),
    };
    Ok((linear(p, "head", features)?, features))
}

fn autoencoder_dims(arch: &Architecture) -> Result<(usize, usize, usize)> {
    match arch {
        Architecture::ConvAutoencoder { hidden, kernel, latent_channels, .. } => Ok((hidden.len() + 1, *kernel, *latent_channels)),
        other => Err(ModelError::Descriptor(format!("{other:?} is not an autoencoder"))),
    }
}

/// Encoder half: `[B, C, H, W] → [B, latent, H, W]`.
pub fn encode<'t, T: Scalar>(p: &Bound<'t, T>, arch: &Architecture, x: Var<'t, T>) -> Result<Var<'t, T>> {
    batch_of(x, arch)?;
    let (layers, kernel, _) = autoencoder_dims(arch)?;
    let mut h = x;
    for l in 0..layers {
        h = conv(p, &format!("enc.c{l}"), h, kernel)?;
        if l + 1 < layers {
            h = h.silu()?;
        }
    }
    Ok(h)
}

/// Decoder half: `[B, latent, H, W] → [B, C, H, W]`.
pub fn decode<'t, T: Scalar>(p: &Bound<'t, T>, arch: &Architecture, z: Var<'t, T>) -> Result<Var<'t, T>> {
    let (layers, kernel, latent) = autoencoder_dims(arch)?;
    let shape = z.shape();
    let mut want = arch.input_shape();
    want[0] = latent;
    if shape.len() != 4 || shape[1..] != want[..] {
        return Err(ModelError::Input { expected: want, got: shape });
    }
    let mut h = z;
    for l in 0..layers {
        h = conv(p, &format!("dec.c{l}"), h, kernel)?;
        if l + 1 < layers {
            h = h.silu()?;
        }
    }
    Ok(h)
}

/// Noise prediction for a batch, outside of any training graph.
pub fn score_net_forward<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    t: &[usize],
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    Ok(denoiser(&p, params.arch(), tape.constant(x.clone()), t, cond)?.tensor())
}

/// Logits (one per row) and penultimate features.
pub fn discriminator_forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let (logit, feat) = critic(&p, params.arch(), tape.constant(x.clone()))?;
    Ok((logit.data(), feat.tensor()))
}

/// Latent code and reconstruction.
pub fn autoencoder_forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let z = encode(&p, params.arch(), tape.constant(x.clone()))?;
    let xhat = decode(&p, params.arch(), z)?;
    Ok((z.tensor(), xhat.tensor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::models::LoraAdapter;
    use crate::rng;

    fn mlp(cond_dim: usize) -> Architecture {
        Architecture::MlpDenoiser { data_dim: 2, hidden: vec![16, 16], time_dim: 8, cond_dim }
    }

    fn conv_den(cond_dim: usize) -> Architecture {
        Architecture::ConvDenoiser { channels: 1, hidden: vec![3, 3], kernel: 3, time_dim: 4, cond_dim, height: 5, width: 5 }
    }

    #[test]
    fn zero_weights_give_zero_prediction() {
        for arch in [mlp(1), conv_den(1)] {
            let p = ModelParams::<f64>::zeros(arch.clone()).unwrap();
            let mut shape = vec![3];
            shape.extend(arch.input_shape());
            let x = rng::normal_tensor(shape, &mut rng::seeded(1));
            let out = score_net_forward(&p, &x, &[0, 5, 9], None).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn missing_cond_matches_zero_cond() {
        let mut r = rng::seeded(2);
        for arch in [mlp(1), conv_den(1)] {
            let mut p = ModelParams::<f64>::init(arch.clone(), &mut r).unwrap();
            let cname = if matches!(arch, Architecture::MlpDenoiser { .. }) { "l0.cond" } else { "c0.cond" };
            let w = rng::normal_tensor(p.get(cname).unwrap().shape().to_vec(), &mut r);
            p.set(cname, w).unwrap();
            let mut shape = vec![2];
            shape.extend(arch.input_shape());
            let x = rng::normal_tensor(shape, &mut r);
            let a = score_net_forward(&p, &x, &[3, 4], None).unwrap();
            let b = score_net_forward(&p, &x, &[3, 4], Some(&Tensor::zeros(vec![2, 1]))).unwrap();
            assert_eq!(a, b);
            let c = score_net_forward(&p, &x, &[3, 4], Some(&Tensor::ones(vec![2, 1]))).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn zero_critic_is_undecided() {
        let arch = Architecture::MlpCritic { data_dim: 2, hidden: vec![8, 5] };
        let p = ModelParams::<f64>::zeros(arch).unwrap();
        let (logits, feats) = discriminator_forward(&p, &Tensor::ones(vec![4, 2])).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
        assert_eq!(feats.shape(), [4, 5]);
        let conv = Architecture::ConvCritic { channels: 1, hidden: vec![3, 6], kernel: 3, height: 4, width: 4 };
        let p = ModelParams::<f64>::init(conv, &mut rng::seeded(0)).unwrap();
        let (_, feats) = discriminator_forward(&p, &Tensor::ones(vec![2, 1, 4, 4])).unwrap();
        assert_eq!(feats.shape(), [2, 6]);
    }

    #[test]
    fn autoencoder_shapes() {
        let arch = Architecture::ConvAutoencoder { channels: 1, hidden: vec![4], latent_channels: 2, kernel: 3, height: 6, width: 6 };
        let p = ModelParams::<f64>::init(arch, &mut rng::seeded(3)).unwrap();
        let x = rng::normal_tensor(vec![3, 1, 6, 6], &mut rng::seeded(4));
        let (z, xhat) = autoencoder_forward(&p, &x).unwrap();
        assert_eq!(z.shape(), [3, 2, 6, 6]);
        assert_eq!(xhat.shape(), x.shape());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let p = ModelParams::<f64>::zeros(mlp(0)).unwrap();
        let err = score_net_forward(&p, &Tensor::ones(vec![2, 3]), &[0, 0], None).unwrap_err();
        assert!(matches!(err, ModelError::Input { .. }));
    }

    #[test]
    fn denoiser_input_gradients_match_differences() {
        let mut r = rng::seeded(5);
        for arch in [mlp(1), conv_den(1)] {
            let p = ModelParams::<f64>::init(arch.clone(), &mut r).unwrap();
            let mut shape = vec![2];
            shape.extend(arch.input_shape());
            let x = rng::normal_tensor(shape, &mut r);
            let cond = Tensor::new(vec![2, 1], vec![0.3, -1.2]).unwrap();
            let err = grad_check::<_, ModelError, _>(
                |tape, v| {
                    let b = p.bind_frozen(tape);
                    let out = denoiser(&b, p.arch(), v, &[7, 2], Some(&cond))?;
                    Ok(out.tanh()?.mean()?)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{arch:?}: {err}");
        }
    }

    #[test]
    fn adapter_with_zero_b_is_transparent() {
        let mut r = rng::seeded(6);
        let arch = mlp(0);
        let base = ModelParams::<f64>::init(arch.clone(), &mut r).unwrap();
        let targets = vec!["l0.weight".to_string(), "l1.weight".to_string()];
        let lora = LoraAdapter::new(&base, &targets, 4, 4.0, &mut r).unwrap();
        assert_eq!(crate::models::lora_effective(&base, &lora).unwrap(), base);
        let x = rng::normal_tensor(vec![3, 2], &mut r);
        let tape = Tape::new();
        let b = base.bind_frozen(&tape).with_lora(lora.bind(&tape, false));
        let out = denoiser(&b, &arch, tape.constant(x.clone()), &[1, 2, 3], None).unwrap().tensor();
        assert_eq!(out, score_net_forward(&base, &x, &[1, 2, 3], None).unwrap());
    }

    #[test]
    fn bound_adapter_matches_merged_weights() {
        let mut r = rng::seeded(7);
        let arch = conv_den(0);
        let base = ModelParams::<f64>::init(arch.clone(), &mut r).unwrap();
        let targets = vec!["c1.weight".to_string()];
        let mut lora = LoraAdapter::new(&base, &targets, 2, 2.0, &mut r).unwrap();
        let mut map = lora.to_map();
        let b = map.get_mut("c1.weight.lora_b").unwrap();
        *b = rng::normal_tensor(b.shape().to_vec(), &mut r);
        lora.update_from_map(&map).unwrap();
        let merged = crate::models::lora_effective(&base, &lora).unwrap();
        let x = rng::normal_tensor(vec![2, 1, 5, 5], &mut r);
        let tape = Tape::new();
        let bound = base.bind_frozen(&tape).with_lora(lora.bind(&tape, true));
        let out = denoiser(&bound, &arch, tape.constant(x.clone()), &[0, 1], None).unwrap().tensor();
        let reference = score_net_forward(&merged, &x, &[0, 1], None).unwrap();
        assert!(out.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn time_embedding_is_bounded_and_distinct() {
        let e = time_embedding::<f64>(&[0, 1, 199], 16);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.row(0), e.row(1));
        assert_eq!(e.row(0)[..8], [0.0; 8]);
    }
}
