use crate::scalar::Scalar;

use super::{ModelError, TensorMap};

/// Exponential moving average of a parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    decay: T,
    shadow: TensorMap<T>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(initial: &TensorMap<T>, decay: T) -> Result<Self, ModelError> {
        if !(decay >= T::zero() && decay <= T::one()) {
            return Err(ModelError::Descriptor(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self { decay, shadow: initial.clone() })
    }

    pub fn decay(&self) -> T {
        self.decay
    }

    pub fn shadow(&self) -> &TensorMap<T> {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut TensorMap<T> {
        &mut self.shadow
    }

    /// `shadow ← decay·shadow + (1 − decay)·current`, per element.
    pub fn update(&mut self, current: &TensorMap<T>) -> Result<(), ModelError> {
        if current.len() != self.shadow.len() {
            return Err(ModelError::Descriptor(format!(
                "EMA tracks {} tensors, update has {}",
                self.shadow.len(),
                current.len()
            )));
        }
        let keep = self.decay;
        let take = T::one() - keep;
        for (name, s) in self.shadow.iter_mut() {
            let c = current.get(name).ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            if c.shape() != s.shape() {
                return Err(ModelError::Shape { name: name.clone(), expected: s.shape().to_vec(), got: c.shape().to_vec() });
            }
            for (sv, &cv) in s.data_mut().iter_mut().zip(c.data()) {
                *sv = keep * *sv + take * cv;
            }
        }
        Ok(())
    }
}
