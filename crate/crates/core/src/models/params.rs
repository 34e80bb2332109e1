use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::lora::BoundLora;
use super::ModelError;

/// Ordered name → tensor collection.
pub type TensorMap<T> = IndexMap<String, Tensor<T>>;

/// Architecture descriptor; determines every parameter name and shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Noise predictor on flat vectors; also the generator body.
    MlpDenoiser { data_dim: usize, hidden: Vec<usize>, time_dim: usize, cond_dim: usize },
    /// Noise predictor on `[C, H, W]` grids; also the generator body.
    ConvDenoiser {
        channels: usize,
        hidden: Vec<usize>,
        kernel: usize,
        time_dim: usize,
        cond_dim: usize,
        height: usize,
        width: usize,
    },
    MlpCritic { data_dim: usize, hidden: Vec<usize> },
    ConvCritic { channels: usize, hidden: Vec<usize>, kernel: usize, height: usize, width: usize },
    ConvAutoencoder {
        channels: usize,
        hidden: Vec<usize>,
        latent_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    Zero,
}

impl Architecture {
    /// Per-sample input shape (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Self::MlpDenoiser { data_dim, .. } | Self::MlpCritic { data_dim, .. } => vec![*data_dim],
            Self::ConvDenoiser { channels, height, width, .. }
            | Self::ConvCritic { channels, height, width, .. }
            | Self::ConvAutoencoder { channels, height, width, .. } => vec![*channels, *height, *width],
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            Self::MlpDenoiser { cond_dim, .. } | Self::ConvDenoiser { cond_dim, .. } => *cond_dim,
            _ => 0,
        }
    }

    pub fn time_dim(&self) -> usize {
        match self {
            Self::MlpDenoiser { time_dim, .. } | Self::ConvDenoiser { time_dim, .. } => *time_dim,
            _ => 0,
        }
    }

    /// Canonical parameter manifest in binding order.
    pub(crate) fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<_>, name: &str, o: usize, i: usize| {
            out.push((format!("{name}.weight"), vec![o, i], Init::FanIn(i)));
            out.push((format!("{name}.bias"), vec![o], Init::FanIn(i)));
        };
        let conv = |out: &mut Vec<_>, name: &str, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, i, k, k], Init::FanIn(i * k * k)));
            out.push((format!("{name}.bias"), vec![o], Init::FanIn(i * k * k)));
        };
        match self {
            Self::MlpDenoiser { data_dim, hidden, time_dim, cond_dim } => {
                let widths = chain(*data_dim + *time_dim, hidden, *data_dim);
                for (l, w) in widths.windows(2).enumerate() {
                    linear(&mut out, &format!("l{l}"), w[1], w[0]);
                }
                if *cond_dim > 0 {
                    out.push(("l0.cond".into(), vec![hidden[0], *cond_dim], Init::Zero));
                }
            }
            Self::ConvDenoiser { channels, hidden, kernel, time_dim, cond_dim, .. } => {
                let widths = chain(*channels, hidden, *channels);
                for (l, w) in widths.windows(2).enumerate() {
                    conv(&mut out, &format!("c{l}"), w[1], w[0], *kernel);
                }
                for (l, &c) in hidden.iter().enumerate() {
                    out.push((format!("t{l}.weight"), vec![c, *time_dim], Init::FanIn(*time_dim)));
                }
                if *cond_dim > 0 {
                    out.push(("c0.cond".into(), vec![hidden[0], *cond_dim, *kernel, *kernel], Init::Zero));
                }
            }
            Self::MlpCritic { data_dim, hidden } => {
                let widths = chain(*data_dim, hidden, 0);
                for (l, w) in widths.windows(2).take(hidden.len()).enumerate() {
                    linear(&mut out, &format!("l{l}"), w[1], w[0]);
                }
                linear(&mut out, "head", 1, *hidden.last().unwrap_or(data_dim));
            }
            Self::ConvCritic { channels, hidden, kernel, .. } => {
                let widths = chain(*channels, hidden, 0);
                for (l, w) in widths.windows(2).take(hidden.len()).enumerate() {
                    conv(&mut out, &format!("c{l}"), w[1], w[0], *kernel);
                }
                linear(&mut out, "head", 1, *hidden.last().unwrap_or(channels));
            }
            Self::ConvAutoencoder { channels, hidden, latent_channels, kernel, .. } => {
                for (l, w) in chain(*channels, hidden, *latent_channels).windows(2).enumerate() {
                    conv(&mut out, &format!("enc.c{l}"), w[1], w[0], *kernel);
                }
                let rev: Vec<usize> = hidden.iter().rev().copied().collect();
                for (l, w) in chain(*latent_channels, &rev, *channels).windows(2).enumerate() {
                    conv(&mut out, &format!("dec.c{l}"), w[1], w[0], *kernel);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::Descriptor(format!("{msg} in {self:?}")));
        match self {
            Self::MlpDenoiser { data_dim, hidden, time_dim, .. } => {
                if *data_dim == 0 || hidden.is_empty() {
                    return bad("denoiser needs a data dimension and at least one hidden layer");
                }
                if time_dim % 2 != 0 {
                    return bad("time embedding width must be even");
                }
            }
            Self::ConvDenoiser { channels, hidden, kernel, time_dim, .. } => {
                if *channels == 0 || hidden.is_empty() || kernel % 2 == 0 {
                    return bad("conv denoiser needs channels, hidden layers and an odd kernel");
                }
                if time_dim % 2 != 0 {
                    return bad("time embedding width must be even");
                }
            }
            Self::MlpCritic { data_dim, hidden } => {
                if *data_dim == 0 || hidden.is_empty() {
                    return bad("critic needs a data dimension and hidden layers");
                }
            }
            Self::ConvCritic { channels, hidden, kernel, .. } => {
                if *channels == 0 || hidden.is_empty() || kernel % 2 == 0 {
                    return bad("conv critic needs channels, hidden layers and an odd kernel");
                }
            }
            Self::ConvAutoencoder { channels, latent_channels, kernel, .. } => {
                if *channels == 0 || *latent_channels == 0 || kernel % 2 == 0 {
                    return bad("autoencoder needs channels, latent channels and an odd kernel");
                }
            }
        }
        if self.layout().iter().any(|(_, s, _)| s.contains(&0)) {
            return bad("zero-width layer");
        }
        Ok(())
    }
}

fn chain(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(hidden.len() + 2);
    v.push(first);
    v.extend_from_slice(hidden);
    v.push(last);
    v
}

/// Named parameters of one network, tied to its descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    arch: Architecture,
    tensors: TensorMap<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Checks names and shapes against the descriptor.
    pub fn new(arch: Architecture, tensors: TensorMap<T>) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::Descriptor(format!(
                "descriptor lists {} parameters, {} given",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &layout {
            let t = tensors.get(name).ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() });
            }
        }
        let mut ordered = TensorMap::with_capacity(tensors.len());
        let mut tensors = tensors;
        for (name, _, _) in &layout {
            let t = tensors.shift_remove(name).expect("checked above");
            ordered.insert(name.clone(), t);
        }
        Ok(Self { arch, tensors: ordered })
    }

    /// Fresh random weights.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self, ModelError> {
        arch.validate()?;
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(shape),
                    Init::FanIn(fan_in) => {
                        let bound = T::one() / T::of(fan_in as f64).sqrt();
                        Tensor::from_fn(shape, |_| rng::uniform(-bound, bound, rng))
                    }
                };
                (name, t)
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        let tensors = arch.layout().into_iter().map(|(n, s, _)| (n, Tensor::zeros(s))).collect();
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &TensorMap<T> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// Replaces one tensor, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), ModelError> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::Shape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value.with_requires_grad(false);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Largest absolute elementwise difference over all parameters.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.tensors
            .iter()
            .map(|(name, t)| other.tensors.get(name).map_or(T::infinity(), |o| t.max_abs_diff(o)))
            .fold(T::zero(), T::max)
    }

    /// Optimizer update of the tensors named in `grads`.
    pub fn step(&mut self, opt: &mut super::Adam<T>, grads: &TensorMap<T>) -> Result<(), ModelError> {
        opt.step(&mut self.tensors, grads)
    }

    /// Places every parameter on `tape`; `trainable` decides which get gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { tape, vars, lora: None }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| false)
    }
}

/// Parameters placed on a tape, with an optional low-rank adapter.
pub struct Bound<'t, T> {
    tape: &'t Tape<T>,
    vars: IndexMap<String, Var<'t, T>>,
    lora: Option<BoundLora<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn with_lora(mut self, lora: BoundLora<'t, T>) -> Self {
        self.lora = Some(lora);
        self
    }

    pub fn lora(&self) -> Option<&BoundLora<'t, T>> {
        self.lora.as_ref()
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// Weight as used by the forward pass: the base tensor plus any adapter delta.
    pub fn weight(&self, name: &str) -> Result<Var<'t, T>, ModelError> {
        let base = self.get(name)?;
        match self.lora.as_ref().and_then(|l| l.pair(name)) {
            Some(pair) => Ok(base.add(pair.delta(&base.shape())?)?),
            None => Ok(base),
        }
    }

    /// Gradients of the named base parameters after a backward pass.
    pub fn grads(&self, names: impl IntoIterator<Item = impl AsRef<str>>) -> Result<TensorMap<T>, ModelError> {
        names
            .into_iter()
            .map(|n| {
                let n = n.as_ref();
                let v = self.get(n)?;
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                Ok((n.to_string(), g))
            })
            .collect()
    }
}
