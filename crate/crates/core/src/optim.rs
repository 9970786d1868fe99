//! First-order optimizers over named parameter tensors.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::tensor::Tensor;

/// `param -= lr * grad`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) {
    param.axpy(-lr, grad);
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the per-parameter updates.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        let (m, v) = self
            .moments
            .entry(name.into())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= self.lr * (*m / c1) / (libm::sqrt(*v / c2) + self.eps);
        }
    }
}
