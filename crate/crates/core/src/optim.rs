//! Adam over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::layers::{Param, TensorRole, Visitor};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every trainable tensor reachable through `visit`, using
    /// the accumulated gradients, which are then cleared.
    pub fn step(&mut self, visit: impl FnOnce(&mut Visitor<'_, T>)) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        visit(&mut |name, role, p: &mut Param<T>| {
            if role != TensorRole::Trainable {
                return;
            }
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![T::zero(); p.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![T::zero(); p.len()]);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.value[i] = p.value[i] - step_size * m[i] / denom;
            }
            p.zero_grad();
        });
    }
}

/// Clears gradients of every trainable tensor.
pub fn zero_grads<T: Scalar>(visit: impl FnOnce(&mut Visitor<'_, T>)) {
    visit(&mut |_, _, p: &mut Param<T>| p.zero_grad());
}
