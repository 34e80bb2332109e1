use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::models::{denoiser, Architecture, Bound, LoraAdapter, ModelParams, TensorMap};
use crate::rng;
use crate::scalar::Scalar;

use super::{AdversarialError, InitMode, TrainConfig};

/// How the shared network is turned into a restorer `R_θ(y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// `(y − √(1−ᾱ)·ε̂(y, t)) / √ᾱ`: the observation is treated as `x_t`.
    OneStep { t: usize, alpha_bar: f64 },
    /// The network output itself, queried at time index `t`.
    Direct { t: usize },
}

/// Frozen base network plus trainable low-rank factors and unfrozen extras.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub base: ModelParams<T>,
    pub lora: LoraAdapter<T>,
    pub head: Head,
    /// Base tensors that are trained directly (the conditioning input row).
    pub unfrozen: Vec<String>,
}

/// Weights that receive low-rank adapters: every hidden-layer weight of a denoiser.
pub fn lora_targets(arch: &Architecture) -> Vec<String> {
    match arch {
        Architecture::MlpDenoiser { hidden, .. } => (0..hidden.len()).map(|l| format!("l{l}.weight")).collect(),
        Architecture::ConvDenoiser { hidden, .. } => (0..hidden.len()).map(|l| format!("c{l}.weight")).collect(),
        _ => Vec::new(),
    }
}

impl<T: Scalar> Generator<T> {
    /// Places the generator on `tape`; with `trainable` the factors and extras are leaves with gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let unfrozen = &self.unfrozen;
        self.base
            .bind(tape, |n| trainable && unfrozen.iter().any(|u| u == n))
            .with_lora(self.lora.bind(tape, trainable))
    }

    pub fn graph<'t>(&self, p: &Bound<'t, T>, y: Var<'t, T>, cond: Option<&Tensor<T>>) -> Result<Var<'t, T>, AdversarialError> {
        let arch = self.base.arch();
        let n = y.shape()[0];
        match self.head {
            Head::Direct { t } => Ok(denoiser(p, arch, y, &vec![t; n], cond)?),
            Head::OneStep { t, alpha_bar } => {
                let eps = denoiser(p, arch, y, &vec![t; n], cond)?;
                let num = y.sub(eps.scale(T::of((1.0 - alpha_bar).sqrt()))?)?;
                Ok(num.scale(T::of(1.0 / alpha_bar.sqrt()))?)
            }
        }
    }

    pub fn forward(&self, y: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>, AdversarialError> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(self.graph(&p, tape.constant(y.clone()), cond)?.tensor())
    }

    /// Factors and unfrozen tensors under their training names.
    pub fn trainable(&self) -> TensorMap<T> {
        let mut out = self.lora.to_map();
        for n in &self.unfrozen {
            out.insert(n.clone(), self.base.get(n).expect("unfrozen names exist").clone());
        }
        out
    }

    pub fn set_trainable(&mut self, map: &TensorMap<T>) -> Result<(), AdversarialError> {
        self.lora.update_from_map(map)?;
        for n in &self.unfrozen {
            let t = map.get(n).ok_or_else(|| AdversarialError::Shape(format!("missing trainable tensor `{n}`")))?;
            self.base.set(n, t.clone())?;
        }
        Ok(())
    }

    /// Gradients after a backward pass, keyed like [`Self::trainable`].
    pub fn grads(&self, p: &Bound<'_, T>) -> Result<TensorMap<T>, AdversarialError> {
        let mut out = p.lora().map(|l| l.grads()).unwrap_or_default();
        out.extend(p.grads(&self.unfrozen)?);
        Ok(out)
    }
}

/// Pretrained networks and the schedule they were trained with.
#[derive(Clone, Debug, Default)]
pub struct Assets<T> {
    pub diffusion: Option<ModelParams<T>>,
    pub mse: Option<ModelParams<T>>,
    pub dae: Option<ModelParams<T>>,
    /// Clean-versus-degraded classifier whose trunk seeds a pretrained critic.
    pub disc: Option<ModelParams<T>>,
}

fn checked<T: Scalar>(
    asset: &Option<ModelParams<T>>,
    name: &'static str,
    arch: &Architecture,
) -> Result<ModelParams<T>, AdversarialError> {
    let p = asset.as_ref().ok_or(AdversarialError::MissingAsset(name))?;
    if p.arch() != arch {
        return Err(AdversarialError::ArchMismatch {
            name,
            expected: Box::new(arch.clone()),
            got: Box::new(p.arch().clone()),
        });
    }
    Ok(p.clone())
}

/// Builds the step-0 generator for `cfg.init_mode`.
pub fn init_generator<T: Scalar>(
    cfg: &TrainConfig,
    arch: &Architecture,
    assets: &Assets<T>,
    sched: &NoiseSchedule,
) -> Result<Generator<T>, AdversarialError> {
    cfg.validate()?;
    let t = sched.time_for_alpha_bar(cfg.t_star_alpha_bar);
    let (base, head) = match cfg.init_mode {
        InitMode::Diffusion => (checked(&assets.diffusion, "diffusion", arch)?, Head::OneStep { t, alpha_bar: sched.alpha_bar(t)? }),
        InitMode::Mse => (checked(&assets.mse, "mse", arch)?, Head::Direct { t }),
        InitMode::Dae => (checked(&assets.dae, "dae", arch)?, Head::Direct { t }),
        InitMode::Scratch => (ModelParams::init(arch.clone(), &mut rng::derive(cfg.seed, "scratch"))?, Head::Direct { t }),
    };
    let alpha = T::of(cfg.lora_alpha.unwrap_or(cfg.lora_rank as f64));
    let lora = LoraAdapter::new(&base, &lora_targets(arch), cfg.lora_rank, alpha, &mut rng::derive(cfg.seed, "lora"))?;
    let unfrozen = match arch {
        Architecture::MlpDenoiser { cond_dim, .. } if cfg.texture_cond && *cond_dim > 0 => vec!["l0.cond".to_string()],
        Architecture::ConvDenoiser { cond_dim, .. } if cfg.texture_cond && *cond_dim > 0 => vec!["c0.cond".to_string()],
        _ if cfg.texture_cond => return Err(AdversarialError::Config("texture_cond: architecture has no conditioning input".into())),
        _ => Vec::new(),
    };
    Ok(Generator { base, lora, head, unfrozen })
}

/// Inference-time controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Controls {
    /// Scale of the noise added to the observation.
    pub rho: f64,
    /// Conditioning value shared by every row, if any.
    pub texture: Option<f64>,
    pub seed: u64,
}

/// `x̂ = R_θ(y + ρ·ζ, τ)` with `ζ` drawn from `seed`.
pub fn restore<T: Scalar>(gen: &Generator<T>, y: &Tensor<T>, controls: Controls) -> Result<Tensor<T>, AdversarialError> {
    if !(controls.rho >= 0.0) {
        return Err(AdversarialError::Config(format!("rho = {} must be non-negative", controls.rho)));
    }
    let input = if controls.rho > 0.0 {
        let mut r = rng::derive(controls.seed, "restore");
        let rho = T::of(controls.rho);
        Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] + rho * rng::normal::<T>(&mut r))
    } else {
        y.clone()
    };
    let cond = controls.texture.map(|tau| Tensor::full(vec![y.shape()[0], gen.base.arch().cond_dim().max(1)], T::of(tau)));
    gen.forward(&input, cond.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, one_step_restore};

    fn arch(cond_dim: usize) -> Architecture {
        Architecture::MlpDenoiser { data_dim: 2, hidden: vec![16, 16], time_dim: 8, cond_dim }
    }

    #[test]
    fn diffusion_init_is_the_score_restorer() {
        let sched = make_schedule(200, 1e-4, 0.04).unwrap();
        let base = ModelParams::init(arch(0), &mut rng::seeded(2)).unwrap();
        let assets = Assets { diffusion: Some(base.clone()), ..Default::default() };
        let gen = init_generator(&TrainConfig::default(), &arch(0), &assets, &sched).unwrap();
        let Head::OneStep { t, alpha_bar } = gen.head else { panic!("{:?}", gen.head) };
        assert!((alpha_bar - 0.5).abs() < 0.01);
        let y: Tensor<f64> = rng::normal_tensor(vec![32, 2], &mut rng::seeded(3));
        let via_score = one_step_restore(&base, &y, t, &sched, None).unwrap();
        assert!(gen.forward(&y, None).unwrap().max_abs_diff(&via_score) < 1e-12);
    }

    #[test]
    fn missing_or_mismatched_assets() {
        let sched = make_schedule(50, 1e-4, 0.04).unwrap();
        let cfg = TrainConfig { init_mode: InitMode::Mse, ..Default::default() };
        let err = init_generator::<f64>(&cfg, &arch(0), &Assets::default(), &sched).unwrap_err();
        assert!(matches!(err, AdversarialError::MissingAsset("mse")));
        let assets = Assets { mse: Some(ModelParams::init(arch(1), &mut rng::seeded(0)).unwrap()), ..Default::default() };
        let err = init_generator::<f64>(&cfg, &arch(0), &assets, &sched).unwrap_err();
        assert!(matches!(err, AdversarialError::ArchMismatch { .. }));
    }

    #[test]
    fn texture_conditioning_unfreezes_the_input_row() {
        let sched = make_schedule(50, 1e-4, 0.04).unwrap();
        let cfg = TrainConfig { init_mode: InitMode::Scratch, texture_cond: true, ..Default::default() };
        let gen = init_generator::<f64>(&cfg, &arch(1), &Assets::default(), &sched).unwrap();
        assert!(gen.trainable().contains_key("l0.cond"));
        assert!(init_generator::<f64>(&cfg, &arch(0), &Assets::default(), &sched).is_err());
    }

    #[test]
    fn restore_without_noise_is_deterministic_and_noise_is_seeded() {
        let sched = make_schedule(50, 1e-4, 0.04).unwrap();
        let cfg = TrainConfig { init_mode: InitMode::Scratch, ..Default::default() };
        let gen = init_generator::<f64>(&cfg, &arch(0), &Assets::default(), &sched).unwrap();
        let y = Tensor::from_fn(vec![8, 2], |i| i as f64 / 8.0);
        let c = |rho, seed| Controls { rho, texture: None, seed };
        assert_eq!(restore(&gen, &y, c(0.0, 1)).unwrap(), restore(&gen, &y, c(0.0, 2)).unwrap());
        assert_eq!(restore(&gen, &y, c(0.3, 1)).unwrap(), restore(&gen, &y, c(0.3, 1)).unwrap());
        assert_ne!(restore(&gen, &y, c(0.3, 1)).unwrap(), restore(&gen, &y, c(0.3, 2)).unwrap());
        assert!(restore(&gen, &y, c(-1.0, 1)).is_err());
    }
}
