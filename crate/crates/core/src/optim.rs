//! Adaptive-moment optimiser with decoupled weight decay.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        AdamW { config, step: 0, first: vec![None; num_params], second: vec![None; num_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Frozen parameters and parameters without a gradient
    /// are left untouched, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, wd, eps) = (T::lit(c.lr), T::lit(c.weight_decay), T::lit(c.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let (r, cols) = grad.shape();
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(r, cols));
            for (mi, &gi) in m.data_mut().iter_mut().zip(grad.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(r, cols));
            for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = self.first[id.0].as_ref().expect("initialised");
            let v = self.second[id.0].as_ref().expect("initialised");
            let p = store.get_mut(*id);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let decayed = *pi - lr * wd * *pi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *pi = decayed - lr * update;
            }
        }
    }
}
