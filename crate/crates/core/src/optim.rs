//! ADAM optimizer over visitor-exposed parameters, plus gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamVisitor, Parameterized};
use crate::objective::NoiseParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// ADAM over every tensor a [`Parameterized`] model exposes. Moment
/// buffers are keyed by parameter name, so they survive serialization and
/// reattach by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One update from the accumulated gradients. Gradients are left
    /// untouched; the caller zeroes them.
    pub fn step(&mut self, model: &mut impl Parameterized) {
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        struct Update<'a> {
            slots: &'a mut BTreeMap<String, AdamSlot>,
            lr: f64,
            bias1: f64,
            bias2: f64,
        }
        impl ParamVisitor for Update<'_> {
            fn visit(&mut self, name: &str, _: &[usize], value: &mut [f32], grad: &mut [f32]) {
                let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                    m: vec![0.0; value.len()],
                    v: vec![0.0; value.len()],
                });
                for i in 0..value.len() {
                    let g = grad[i] as f64;
                    let m = ADAM_BETA1 * slot.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
                    let v = ADAM_BETA2 * slot.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
                    slot.m[i] = m as f32;
                    let m = slot.m[i] as f64;
                    slot.v[i] = v as f32;
                    let v = slot.v[i] as f64;
                    let update = self.lr * (m / self.bias1) / ((v / self.bias2).sqrt() + ADAM_EPS);
                    value[i] = (value[i] as f64 - update) as f32;
                }
            }
        }
        model.visit_params(
            "",
            &mut Update {
                slots: &mut self.slots,
                lr: self.lr,
                bias1,
                bias2,
            },
        );
    }
}

/// ADAM for the three f64 noise parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAdam {
    pub lr: f64,
    pub t: u64,
    pub m: [f64; 3],
    pub v: [f64; 3],
}

impl NoiseAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: [0.0; 3],
            v: [0.0; 3],
        }
    }

    pub fn step(&mut self, noise: &mut NoiseParams) {
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let grads = noise.grad;
        let values = noise.values_mut();
        for i in 0..3 {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            values[i] -= self.lr * (self.m[i] / bias1) / ((self.v[i] / bias2).sqrt() + ADAM_EPS);
        }
    }
}

/// Squared L2 norm of every model gradient.
pub fn grad_sq_norm(model: &mut impl Parameterized) -> f64 {
    struct Norm(f64);
    impl ParamVisitor for Norm {
        fn visit(&mut self, _: &str, _: &[usize], _: &mut [f32], grad: &mut [f32]) {
            self.0 += grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        }
    }
    let mut n = Norm(0.0);
    model.visit_params("", &mut n);
    n.0
}

fn scale_grads(model: &mut impl Parameterized, scale: f64) {
    struct Scale(f32);
    impl ParamVisitor for Scale {
        fn visit(&mut self, _: &str, _: &[usize], _: &mut [f32], grad: &mut [f32]) {
            for g in grad.iter_mut() {
                *g *= self.0;
            }
        }
    }
    model.visit_params("", &mut Scale(scale as f32));
}

/// Clip the global gradient norm (model and noise gradients jointly) to
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(
    model: &mut impl Parameterized,
    noise: &mut NoiseParams,
    max_norm: f64,
) -> f64 {
    let norm = (grad_sq_norm(model) + noise.grad.iter().map(|g| g * g).sum::<f64>()).sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        scale_grads(model, scale);
        for g in noise.grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}
