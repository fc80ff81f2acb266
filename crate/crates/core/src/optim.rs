//! Adam and the warmup learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Owns its moment buffers; one instance per
/// model.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.config.eps);
        let (b1, b2) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(crate::params::ParamId(i));
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Linear ramp from 0 to `base_lr` over the first `warmup_fraction *
/// total_steps` steps, constant afterwards.
pub fn lr_at(step: u64, base_lr: f64, warmup_fraction: f64, total_steps: u64) -> f64 {
    let warmup = warmup_fraction * total_steps as f64;
    if warmup <= 0.0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup).min(1.0)
}
