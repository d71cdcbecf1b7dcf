//! Adam with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments, one tensor per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64, config: &AdamConfig) {
        self.step += 1;
        let c1 = 1.0 - config.beta1.powi(self.step as i32);
        let c2 = 1.0 - config.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (((id, g), m), v) in ids.into_iter().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            let p = store.get_mut(id);
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
