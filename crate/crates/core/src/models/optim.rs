use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::{ModelError, TensorMap};

/// First-order optimizer with bias-corrected adaptive moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: TensorMap<T>,
    v: TensorMap<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, params: &TensorMap<T>) -> Self {
        Self::with_betas(lr, T::of(0.9), T::of(0.999), params)
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, params: &TensorMap<T>) -> Self {
        let zeros: TensorMap<T> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        Self { lr, beta1, beta2, eps: T::of(1e-8), step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&TensorMap<T>, &TensorMap<T>) {
        (&self.m, &self.v)
    }

    /// Restores moment estimates saved by a checkpoint.
    pub fn restore(&mut self, step: u64, m: TensorMap<T>, v: TensorMap<T>) -> Result<(), ModelError> {
        for (name, t) in &self.m {
            for other in [&m, &v] {
                let o = other.get(name).ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
                if o.shape() != t.shape() {
                    return Err(ModelError::Shape { name: name.clone(), expected: t.shape().to_vec(), got: o.shape().to_vec() });
                }
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every tensor in `params` that has an entry in `grads`.
    pub fn step(&mut self, params: &mut TensorMap<T>, grads: &TensorMap<T>) -> Result<(), ModelError> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            let v = self.v.get_mut(name).expect("m and v share keys");
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(ModelError::Shape { name: name.clone(), expected: p.shape().to_vec(), got: g.shape().to_vec() });
            }
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = TensorMap::<f64>::new();
        params.insert("x".into(), Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.05, &params);
        for _ in 0..2000 {
            let g: TensorMap<f64> = params.iter().map(|(k, t)| (k.clone(), t.map(|v| 2.0 * v))).collect();
            opt.step(&mut params, &g).unwrap();
        }
        assert!(params["x"].data().iter().all(|v| v.abs() < 1e-3), "{:?}", params["x"]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = TensorMap::new();
        params.insert("x".into(), Tensor::<f64>::scalar(1.0));
        let mut opt = Adam::new(0.01, &params);
        let mut g = TensorMap::new();
        g.insert("x".into(), Tensor::scalar(123.0));
        opt.step(&mut params, &g).unwrap();
        assert!((params["x"].item() - 0.99).abs() < 1e-9);
    }
}
