//! Minimal dense/conv network stack, f64 end to end.
//!
//! Everything is hand-rolled on `ndarray` for one reason: byte-level
//! determinism. A single thread, one floating-point type, and explicit
//! backward passes make checkpoint round-trips and rerun comparisons exact,
//! which several acceptance tests demand.
//!
//! Layers own their caches, and each cache slot holds exactly one forward
//! pass, so training loops must complete a layer's backward before running
//! its next forward. The critic additionally supports three special passes
//! used by the gradient penalty:
//!
//! * `backward_input` — input gradient only, no parameter accumulation;
//! * `forward_tangent` — pushes a tangent vector through the network's
//!   linearization at the cached activation pattern (a JVP);
//! * `backward_linearized` — accumulates parameter gradients of the scalar
//!   tangent output, using the tangent activations as inputs.
//!
//! For piecewise-linear critics (conv / leaky-relu / pool / linear), those
//! three passes compute the gradient-penalty parameter gradient exactly, with
//! no second-order approximation.

pub mod act;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod resample;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// One learnable tensor with its gradient and optimizer moments.
///
/// Moments live here (not in the optimizer) so checkpoints capture the full
/// training state without a parallel registry.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Param {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Standard-normal entries (used with runtime equalized scaling).
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let mut value = ArrayD::zeros(IxDyn(shape));
        for v in value.iter_mut() {
            *v = crate::rng::normal(rng);
        }
        Param::new(value)
    }

    /// Normal entries with the given standard deviation.
    pub fn randn_scaled(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Param::randn(shape, rng);
        p.value.mapv_inplace(|v| v * std);
        p
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding named parameters. Visit order must be stable: it defines
/// checkpoint blob layout.
pub trait Parameterized {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.numel());
        n
    }
}

/// He-init standard deviation for a fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Join a visitor prefix and a component name with '/'.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn param_moments_start_at_zero() {
        let mut rng = seeded(1, "p");
        let p = Param::randn(&[3, 4], &mut rng);
        assert_eq!(p.grad.sum(), 0.0);
        assert_eq!(p.m.sum(), 0.0);
        assert_eq!(p.v.sum(), 0.0);
        assert_eq!(p.numel(), 12);
    }
}
