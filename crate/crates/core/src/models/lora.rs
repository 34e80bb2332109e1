use indexmap::IndexMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::{ModelError, ModelParams, TensorMap};

/// Low-rank factors for one weight: `delta = (alpha / rank) · A · B`.
///
/// `A` is `d_out × r` and `B` is `r × d_in`, where `d_in` is the product of
/// all trailing weight dimensions (a conv kernel is flattened).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    rank: usize,
    alpha: T,
    pairs: IndexMap<String, LoraPair<T>>,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

impl<T: Scalar> LoraAdapter<T> {
    /// New adapter over `targets` with `A` Gaussian (variance 1/r) and `B = 0`,
    /// so the effective weights start out equal to the base.
    pub fn new(base: &ModelParams<T>, targets: &[String], rank: usize, alpha: T, rng: &mut Rng) -> Result<Self, ModelError> {
        let mut pairs = IndexMap::new();
        if rank > 0 {
            let std = T::one() / T::of(rank as f64).sqrt();
            for name in targets {
                let (d_out, d_in) = matrix_dims(base.get(name)?.shape());
                if rank > d_out.min(d_in) {
                    return Err(ModelError::Rank { name: name.clone(), rank, max: d_out.min(d_in) });
                }
                let a = Tensor::from_fn(vec![d_out, rank], |_| std * rng::normal::<T>(rng));
                let b = Tensor::zeros(vec![rank, d_in]);
                pairs.insert(name.clone(), LoraPair { a, b });
            }
        }
        Ok(Self { rank, alpha, pairs })
    }

    /// Adapter from explicit factors; shapes are checked against `base`.
    pub fn from_pairs(base: &ModelParams<T>, rank: usize, alpha: T, pairs: IndexMap<String, LoraPair<T>>) -> Result<Self, ModelError> {
        for (name, p) in &pairs {
            let (d_out, d_in) = matrix_dims(base.get(name)?.shape());
            if rank > d_out.min(d_in) {
                return Err(ModelError::Rank { name: name.clone(), rank, max: d_out.min(d_in) });
            }
            if p.a.shape() != [d_out, rank] || p.b.shape() != [rank, d_in] {
                return Err(ModelError::Shape {
                    name: name.clone(),
                    expected: vec![d_out, rank, rank, d_in],
                    got: [p.a.shape(), p.b.shape()].concat(),
                });
            }
        }
        Ok(Self { rank, alpha, pairs: if rank == 0 { IndexMap::new() } else { pairs } })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn scale(&self) -> T {
        if self.rank == 0 {
            T::zero()
        } else {
            self.alpha / T::of(self.rank as f64)
        }
    }

    pub fn pairs(&self) -> &IndexMap<String, LoraPair<T>> {
        &self.pairs
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    /// Flat view of the trainable factors, named `<weight>.lora_a` / `.lora_b`.
    pub fn to_map(&self) -> TensorMap<T> {
        let mut out = TensorMap::new();
        for (name, p) in &self.pairs {
            out.insert(format!("{name}.lora_a"), p.a.clone());
            out.insert(format!("{name}.lora_b"), p.b.clone());
        }
        out
    }

    /// Writes factors back from a map produced by [`Self::to_map`].
    pub fn update_from_map(&mut self, map: &TensorMap<T>) -> Result<(), ModelError> {
        for (name, p) in self.pairs.iter_mut() {
            for (suffix, slot) in [("lora_a", &mut p.a), ("lora_b", &mut p.b)] {
                let key = format!("{name}.{suffix}");
                let t = map.get(&key).ok_or_else(|| ModelError::UnknownParam(key.clone()))?;
                if t.shape() != slot.shape() {
                    return Err(ModelError::Shape { name: key, expected: slot.shape().to_vec(), got: t.shape().to_vec() });
                }
                *slot = t.clone().with_requires_grad(false);
            }
        }
        Ok(())
    }

    /// `scale · A · B` reshaped like the base weight.
    pub fn delta(&self, name: &str, shape: &[usize]) -> Option<Tensor<T>> {
        let p = self.pairs.get(name)?;
        let (d_out, d_in) = (p.a.shape()[0], p.b.shape()[1]);
        let mut out = vec![T::zero(); d_out * d_in];
        T::gemm(
            d_out,
            self.rank,
            d_in,
            self.scale(),
            p.a.data(),
            (self.rank as isize, 1),
            p.b.data(),
            (d_in as isize, 1),
            T::zero(),
            &mut out,
            (d_in as isize, 1),
        );
        Tensor::new(shape.to_vec(), out).ok()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundLora<'t, T> {
        let leaf = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let pairs = self
            .pairs
            .iter()
            .map(|(name, p)| (name.clone(), BoundPair { a: leaf(&p.a), b: leaf(&p.b), scale: self.scale() }))
            .collect();
        BoundLora { pairs }
    }
}

/// Merged weights `W + (alpha/r)·A·B` for every targeted name; others are copied unchanged.
pub fn lora_effective<T: Scalar>(base: &ModelParams<T>, adapter: &LoraAdapter<T>) -> Result<ModelParams<T>, ModelError> {
    let mut out = base.clone();
    for name in adapter.targets() {
        let w = base.get(name)?;
        let delta = adapter.delta(name, w.shape()).expect("target exists");
        let merged = w.zip_map(&delta, |a, b| a + b)?;
        out.set(name, merged)?;
    }
    Ok(out)
}

pub struct BoundPair<'t, T> {
    pub a: Var<'t, T>,
    pub b: Var<'t, T>,
    scale: T,
}

impl<'t, T: Scalar> BoundPair<'t, T> {
    pub(crate) fn delta(&self, shape: &[usize]) -> Result<Var<'t, T>, ModelError> {
        Ok(self.a.matmul(self.b)?.scale(self.scale)?.reshape(shape)?)
    }
}

pub struct BoundLora<'t, T> {
    pairs: IndexMap<String, BoundPair<'t, T>>,
}

impl<'t, T: Scalar> BoundLora<'t, T> {
    pub fn pair(&self, name: &str) -> Option<&BoundPair<'t, T>> {
        self.pairs.get(name)
    }

    /// Factor gradients keyed like [`LoraAdapter::to_map`].
    pub fn grads(&self) -> TensorMap<T> {
        let mut out = TensorMap::new();
        for (name, p) in &self.pairs {
            for (suffix, v) in [("lora_a", p.a), ("lora_b", p.b)] {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                out.insert(format!("{name}.{suffix}"), g);
            }
        }
        out
    }
}
