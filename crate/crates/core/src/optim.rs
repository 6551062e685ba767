//! Adam with bias correction and the poly learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Any non-finite
    /// gradient aborts the step before a single weight changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::Usage(format!("non-finite gradient in {name} at index {i}")));
            }
            let p = store.param(name)?;
            if p.numel() != g.len() {
                return Err(TensorError::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (name, g) in grads {
            let p = store.params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base · (1 − step/total)^0.9`, zero from `total` on.
pub fn poly_lr(step: usize, total: usize, base_lr: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / total as f64).powf(0.9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.params.insert("w".into(), Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut s = store(&[1.0, -2.0]);
        let mut adam = Adam::default();
        adam.step(&mut s, &BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]), 0.1).unwrap();
        assert_eq!(s.params["w"].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0]);
        let mut adam = Adam::default();
        adam.step(&mut s, &BTreeMap::from([("w".to_string(), vec![3.0])]), 0.01).unwrap();
        assert!((s.params["w"].data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut s = store(&[1.0]);
        let mut adam = Adam::default();
        let err = adam.step(&mut s, &BTreeMap::from([("w".to_string(), vec![f64::NAN])]), 0.01).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(s.params["w"].data(), &[1.0]);
    }

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0, 100, 0.5), 0.5);
        assert_eq!(poly_lr(100, 100, 0.5), 0.0);
        assert_eq!(poly_lr(150, 100, 0.5), 0.0);
        assert!((poly_lr(50, 100, 1.0) - 0.5f64.powf(0.9)).abs() < 1e-15);
    }
}
