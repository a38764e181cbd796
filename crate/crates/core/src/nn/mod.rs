//! Minimal neural-network layer kit with explicit forward/backward passes.
//!
//! Weights and activations are f32; every layer owns its parameters and a
//! same-shaped gradient buffer that backward passes accumulate into.
//! Parameters are reached uniformly through [`ParamVisitor`], which the
//! optimizer, the checkpoint writer, and gradient clipping all share.
//! Initialization draws from a caller-supplied seeded generator, and
//! construction order is fixed, so a seed fully determines the weights.

pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Uniform access to named parameter tensors and their gradients.
pub trait ParamVisitor {
    fn visit(&mut self, name: &str, shape: &[usize], value: &mut [f32], grad: &mut [f32]);
}

/// Anything holding trainable parameters.
pub trait Parameterized {
    /// Visit every parameter tensor under `prefix` in a fixed order.
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor);

    fn zero_grads(&mut self) {
        struct Zero;
        impl ParamVisitor for Zero {
            fn visit(&mut self, _: &str, _: &[usize], _: &mut [f32], grad: &mut [f32]) {
                grad.fill(0.0);
            }
        }
        self.visit_params("", &mut Zero);
    }

    fn parameter_count(&mut self) -> usize {
        struct Count(usize);
        impl ParamVisitor for Count {
            fn visit(&mut self, _: &str, _: &[usize], value: &mut [f32], _: &mut [f32]) {
                self.0 += value.len();
            }
        }
        let mut c = Count(0);
        self.visit_params("", &mut c);
        c.0
    }
}

/// He-normal initialization for layers feeding a GELU.
pub fn init_he(rng: &mut impl Rng, fan_in: usize, out: &mut [f32]) {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    for v in out {
        *v = normal.sample(rng);
    }
}

/// Xavier-uniform initialization for linear maps without a following
/// nonlinearity (attention projections, output layers).
pub fn init_xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, out: &mut [f32]) {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let uniform = Uniform::new(-bound, bound);
    for v in out {
        *v = uniform.sample(rng);
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
