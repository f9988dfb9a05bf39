//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::numerics::params::Parameter;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first and second moment estimates.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam state for a fixed, ordered set of parameters.
///
/// The slot for each parameter is identified by position, so every call
/// to [`Adam::step`] must pass the same parameters in the same order.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    slots: Vec<Moments>,
}

impl Adam {
    /// Creates an optimizer with empty state; moments are allocated on
    /// the first step.
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, steps: 0, slots: Vec::new() }
    }

    /// Hyperparameters in use.
    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients currently accumulated in
    /// `params`. Gradients are not cleared; callers decide when to call
    /// [`Parameter::zero_grad`].
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Moments { m: vec![0.0; p.value.len()], v: vec![0.0; p.value.len()] })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state tracks {} parameters, step received {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.config;
        // Bias corrections in f64; beta^t underflows f32 late in training.
        let corr1 = (1.0 - (c.beta1 as f64).powi(t)) as f32;
        let corr2 = (1.0 - (c.beta2 as f64).powi(t)) as f32;

        for (param, slot) in params.iter_mut().zip(&mut self.slots) {
            if param.value.len() != slot.m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} changed size under the optimizer",
                    param.name
                )));
            }
            let g = param.grad.data();
            let theta = param.value.data_mut();
            for i in 0..theta.len() {
                let gi = g[i];
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * gi;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = slot.m[i] / corr1;
                let v_hat = slot.v[i] / corr2;
                theta[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    /// Independent single-step oracle: after one step with gradient g,
    /// theta' = theta - lr * m_hat / (sqrt(v_hat) + eps) with
    /// m_hat = g and v_hat = g * g (bias corrections cancel at t = 1).
    fn one_step_oracle(theta: f32, g: f32, c: &AdamConfig) -> f32 {
        let m = (1.0 - c.beta1) * g;
        let v = (1.0 - c.beta2) * g * g;
        let m_hat = m / (1.0 - c.beta1);
        let v_hat = v / (1.0 - c.beta2);
        theta - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon)
    }

    #[test]
    fn single_step_matches_hand_oracle() {
        let config = AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() };
        let mut p = Parameter::new("w", Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut opt = Adam::new(config);
        opt.step(&mut [&mut p]).unwrap();

        for (i, &g) in [1.0f32, -2.0].iter().enumerate() {
            let expect = one_step_oracle([0.5, -0.25][i], g, &config);
            assert!((p.value.data()[i] - expect).abs() < 1e-7);
        }
        // With a unit gradient the first step moves by almost exactly lr.
        let moved = 0.5 - p.value.data()[0];
        assert!((moved - 1e-3).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Parameter::new("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let before = p.value.clone();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn two_steps_match_sequential_oracle() {
        // Constant gradient; replay the recurrence by hand in f32.
        let c = AdamConfig { learning_rate: 0.01, ..AdamConfig::default() };
        let g = 0.7f32;
        let mut theta = 1.0f32;
        let (mut m, mut v) = (0.0f32, 0.0f32);
        for t in 1..=2 {
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let corr1 = (1.0 - (c.beta1 as f64).powi(t)) as f32;
            let corr2 = (1.0 - (c.beta2 as f64).powi(t)) as f32;
            theta -= c.learning_rate * (m / corr1) / ((v / corr2).sqrt() + c.epsilon);
        }

        let mut p = Parameter::new("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut opt = Adam::new(c);
        for _ in 0..2 {
            p.grad = Tensor::from_vec(&[1], vec![g]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.value.data()[0] - theta).abs() < 1e-7);
    }

    #[test]
    fn rejects_changed_parameter_count() {
        let mut a = Parameter::new("a", Tensor::zeros(&[2]));
        let mut b = Parameter::new("b", Tensor::zeros(&[2]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut a, &mut b]).unwrap();
        assert!(opt.step(&mut [&mut a]).is_err());
    }
}
