//! Adam with bias correction.

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Optimizer state: per-parameter moment estimates plus a step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store. Gradients must be
    /// populated; they are left untouched (the caller zeroes them).
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.is_empty() {
            self.m = store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer state covers {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        for i in 0..store.len() {
            let id = super::ParamId(i);
            let grad = match &store.entries()[i].grad {
                Some(g) => g.data().to_vec(),
                None => {
                    return Err(Error::Contract(format!(
                        "missing gradient for parameter '{}'",
                        store.name(id)
                    )))
                }
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
