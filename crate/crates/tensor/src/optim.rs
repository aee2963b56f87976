use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
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

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bias1);
        let bias2_sqrt = T::lit(bias2.sqrt());
        let eps = T::lit(c.eps);
        for (id, grad) in grads.params() {
            let ParamId(i) = id;
            let shape = grad.shape().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.value_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *p *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / bias2_sqrt + eps;
                *p -= step_size * *m / denom;
            }
        }
    }

    /// Moment buffers for checkpointing, in parameter order.
    pub fn state(&self) -> (u64, &[Option<Tensor<T>>], &[Option<Tensor<T>>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(
        config: AdamWConfig,
        step: u64,
        first: Vec<Option<Tensor<T>>>,
        second: Vec<Option<Tensor<T>>>,
    ) -> Self {
        assert_eq!(first.len(), second.len());
        AdamW { config, step, first, second }
    }
}
