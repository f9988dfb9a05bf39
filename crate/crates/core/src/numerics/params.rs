//! Named trainable parameters.

use crate::numerics::tensor::Tensor;

/// A named trainable tensor with its accumulated gradient.
///
/// Gradients accumulate across backward passes until
/// [`Parameter::zero_grad`] is called, so one optimizer step can gather
/// contributions from several tapes.
#[derive(Debug, Clone)]
pub struct Parameter {
    /// Stable hierarchical name, e.g. `f_small.conv1.weight`. Used as
    /// the key in serialized checkpoints.
    pub name: String,
    /// Current value.
    pub value: Tensor<f32>,
    /// Accumulated gradient, same shape as `value`.
    pub grad: Tensor<f32>,
}

impl Parameter {
    /// Wraps a value tensor with a zeroed gradient.
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad }
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    /// Adds a gradient contribution (shape must match).
    pub fn accumulate(&mut self, contribution: &Tensor<f32>) {
        self.grad.add_assign(contribution);
    }
}
