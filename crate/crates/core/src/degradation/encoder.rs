use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::models::{autoencoder_forward, decode, encode, Adam, ModelParams};
use crate::rng;
use crate::scalar::Scalar;

use super::DegradationError;

/// Reconstruction error above which an autoencoder counts as untrained.
const PRETRAINED_LIMIT: f64 = 0.05;

const ANCHOR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 64, lr: 1e-3, seed: 0 }
    }
}

/// Mean over samples of `‖x̂ − x‖² / dim`.
pub fn reconstruction_error<T: Scalar>(ae: &ModelParams<T>, x: &Tensor<T>) -> Result<f64, DegradationError> {
    let (_, xhat) = autoencoder_forward(ae, x)?;
    Ok(xhat.zip_map(x, |a, b| (a - b) * (a - b))?.data().iter().map(|v| v.f64()).sum::<f64>() / x.numel() as f64)
}

/// Mean Euclidean distance between the codes of paired rows.
pub fn latent_distance<T: Scalar>(ae: &ModelParams<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, DegradationError> {
    let (za, _) = autoencoder_forward(ae, a)?;
    let (zb, _) = autoencoder_forward(ae, b)?;
    let n = za.shape()[0];
    let row = za.numel() / n;
    let diff = za.zip_map(&zb, |p, q| p - q)?;
    Ok(diff.data().chunks(row).map(|c| c.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()).sum::<f64>() / n as f64)
}

/// Trains encoder and decoder to reconstruct rows of `data`.
pub fn pretrain_autoencoder<T: Scalar>(
    mut ae: ModelParams<T>,
    data: &Tensor<T>,
    cfg: &FitConfig,
) -> Result<(ModelParams<T>, Vec<T>), DegradationError> {
    let mut r = rng::derive(cfg.seed, "autoencoder");
    let mut opt = Adam::new(T::of(cfg.lr), ae.tensors());
    let names: Vec<String> = ae.names().map(String::from).collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..data.shape()[0])).collect();
        let x = data.select_rows(&idx);
        let tape = Tape::new();
        let p = ae.bind(&tape, |_| true);
        let xv = tape.constant(x);
        let z = encode(&p, ae.arch(), xv)?;
        let loss = decode(&p, ae.arch(), z)?.squared_error(xv)?;
        tape.backward(loss)?;
        trace.push(loss.item());
        let grads = p.grads(&names)?;
        ae.step(&mut opt, &grads)?;
    }
    Ok((ae, trace))
}

/// Fine-tunes the encoder so degraded inputs decode like their clean
/// counterparts, plus an anchor holding clean reconstructions to the original
/// autoencoder's output. The decoder is frozen.
pub fn fit_preremoval_encoder<T: Scalar>(
    ae: &ModelParams<T>,
    clean: &Tensor<T>,
    degraded: &Tensor<T>,
    cfg: &FitConfig,
) -> Result<ModelParams<T>, DegradationError> {
    if clean.shape() != degraded.shape() {
        return Err(DegradationError::Shape(format!("{:?} vs {:?}", clean.shape(), degraded.shape())));
    }
    let error = reconstruction_error(ae, clean)?;
    if !(error <= PRETRAINED_LIMIT) {
        return Err(DegradationError::Unpretrained { error, limit: PRETRAINED_LIMIT });
    }
    // both sides pass through the encoder being fitted, which alone collapses
    // every input onto one code; the anchor keeps clean reconstructions where
    // the original encoder put them
    let (_, target) = autoencoder_forward(ae, clean)?;
    let is_enc = |n: &str| n.starts_with("enc.");
    let names: Vec<String> = ae.names().filter(|n| is_enc(n)).map(String::from).collect();
    let mut out = ae.clone();
    let trainable = names.iter().map(|n| (n.clone(), ae.get(n).unwrap().clone())).collect();
    let mut opt = Adam::new(T::of(cfg.lr), &trainable);
    let mut r = rng::derive(cfg.seed, "preremoval");
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..clean.shape()[0])).collect();
        let tape = Tape::new();
        let p = out.bind(&tape, is_enc);
        let zd = encode(&p, out.arch(), tape.constant(degraded.select_rows(&idx)))?;
        let zc = encode(&p, out.arch(), tape.constant(clean.select_rows(&idx)))?;
        let dc = decode(&p, out.arch(), zc)?;
        let anchor = dc.squared_error(tape.constant(target.select_rows(&idx)))?.scale(T::of(ANCHOR))?;
        let loss = decode(&p, out.arch(), zd)?.squared_error(dc)?.add(anchor)?;
        tape.backward(loss)?;
        let grads = p.grads(&names)?;
        out.step(&mut opt, &grads)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{degrade, gen_dataset, BlurKernel, DatasetSpec, DegradationSpec, TextureSpec};
    use crate::models::Architecture;

    fn small_ae() -> (ModelParams<f64>, Tensor<f64>) {
        let spec = DatasetSpec::Textures { textures: TextureSpec { size: 8, richness: [0.5, 2.0] } };
        let x = gen_dataset::<f64>(&spec, 200, 3).unwrap().x;
        let arch = Architecture::ConvAutoencoder { channels: 1, hidden: vec![4], latent_channels: 2, kernel: 3, height: 8, width: 8 };
        let init = ModelParams::init(arch, &mut rng::seeded(0)).unwrap();
        let (ae, _) = pretrain_autoencoder(init, &x, &FitConfig { steps: 400, batch: 16, lr: 5e-3, seed: 0 }).unwrap();
        (ae, x)
    }

    #[test]
    fn unpretrained_autoencoder_is_rejected() {
        let arch = Architecture::ConvAutoencoder { channels: 1, hidden: vec![4], latent_channels: 2, kernel: 3, height: 8, width: 8 };
        let ae = ModelParams::<f64>::init(arch, &mut rng::seeded(0)).unwrap();
        let x = Tensor::from_fn(vec![4, 1, 8, 8], |i| (i as f64 * 0.7).sin() * 3.0);
        let err = fit_preremoval_encoder(&ae, &x, &x, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, DegradationError::Unpretrained { .. }), "{err}");
    }

    #[test]
    fn clean_pairs_leave_encoder_in_place() {
        let (ae, x) = small_ae();
        assert!(reconstruction_error(&ae, &x).unwrap() < PRETRAINED_LIMIT);
        let fitted = fit_preremoval_encoder(&ae, &x, &x, &FitConfig { steps: 100, batch: 16, lr: 1e-3, seed: 0 }).unwrap();
        for name in ae.names() {
            let delta = ae.get(name).unwrap().zip_map(fitted.get(name).unwrap(), |a, b| (a - b).abs()).unwrap();
            assert!(delta.data().iter().all(|&d| d < 1e-3), "{name}");
        }
    }

    #[test]
    fn decoder_is_untouched_and_encoder_moves() {
        let (ae, x) = small_ae();
        let y = degrade(&x, &DegradationSpec::blur(BlurKernel::gaussian(1.0, 3), 0.1), 9).unwrap();
        let fitted = fit_preremoval_encoder(&ae, &x, &y, &FitConfig { steps: 50, batch: 16, lr: 1e-3, seed: 0 }).unwrap();
        let mut moved = false;
        for name in ae.names() {
            let (a, b) = (ae.get(name).unwrap(), fitted.get(name).unwrap());
            if name.starts_with("dec.") {
                assert_eq!(a, b, "{name}");
            } else {
                moved |= a != b;
            }
        }
        assert!(moved);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (ae, x) = small_ae();
        let err = fit_preremoval_encoder(&ae, &x, &x.slice_rows(0, 3), &FitConfig::default()).unwrap_err();
        assert!(matches!(err, DegradationError::Shape(_)));
    }
}
