//! Finite-difference gradient verification.
//!
//! Analytic gradients from [`crate::numerics::tape`] are validated
//! against central differences evaluated in `f64`. These helpers are
//! public so integration suites can run the same checks on composite
//! graphs (full encoders, losses) without duplicating the machinery.

use crate::numerics::tensor::Tensor;

/// Step size for central differences. With `f64` arithmetic this puts
/// the truncation and rounding errors both far below the acceptance
/// tolerance of 1e-4.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
///
/// `f` must be a deterministic map from the tensor to a scalar; it is
/// called twice per element.
pub fn numerical_gradient<F>(f: F, x: &Tensor<f64>) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Relative L2 distance between two gradients:
/// `|a - b| / max(|b|, floor)`. The floor guards against an exactly
/// zero reference.
pub fn relative_l2_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += (x - y) * (x - y);
        norm += y * y;
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}
