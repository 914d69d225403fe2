//! Adam with bias correction.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Model, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

/// First and second moments per parameter slot, created on first use.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Number of completed updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (alloc::vec![T::zero(); p.len()], alloc::vec![T::zero(); p.len()])).collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.moments[i].0.len() {
                return Err(Error::Config(format!(
                    "parameter {i}: {} values, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    self.moments[i].0.len()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - num_traits::Float::powi(c.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(c.beta2, t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (lr, eps) = (T::from_f64(c.learning_rate), T::from_f64(c.epsilon));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for (((w, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every weight and bias of `model` from its stored gradients,
    /// then re-applies pruning masks.
    pub fn step_model(&mut self, model: &mut Model<T>) -> Result<()> {
        let mut params: Vec<&mut [T]> = Vec::new();
        let mut grads: Vec<&[T]> = Vec::new();
        for (_, p) in model.param_layers_mut() {
            let crate::model::ParamLayer { weight, bias, weight_grad, bias_grad, .. } = p;
            params.push(weight.data_mut());
            grads.push(weight_grad.data());
            params.push(bias.data_mut());
            grads.push(bias_grad.data());
        }
        self.step(&mut params, &grads)?;
        model.apply_masks();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut w = [0.5, -0.5, 2.0];
        let g = [0.3, -2.0, 1e-3];
        opt.step(&mut [&mut w[..]], &[&g[..]]).unwrap();
        let before = [0.5, -0.5, 2.0];
        for i in 0..3 {
            let delta = before[i] - w[i];
            assert!((delta - 1e-3 * g[i].signum()).abs() < 1e-3 * 1e-3, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut opt = Adam::<f32>::new(AdamConfig::default());
        let mut w = [1.0f32, -3.0];
        for _ in 0..50 {
            opt.step(&mut [&mut w[..]], &[&[0.0f32, 0.0][..]]).unwrap();
        }
        assert_eq!(w, [1.0, -3.0]);
        assert_eq!(opt.steps(), 50);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        // Scalar, constant gradient g = 0.5, w0 = 1.
        let (lr, b1, b2, eps, g) = (1e-3, 0.9, 0.999, 1e-7, 0.5);
        let mut w_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1f(b1, t));
            let v_hat = v / (1.0 - b1f(b2, t));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        fn b1f(b: f64, t: i32) -> f64 {
            b.powi(t)
        }
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut w = [1.0f64];
        for _ in 0..2 {
            opt.step(&mut [&mut w[..]], &[&[g][..]]).unwrap();
        }
        assert!((w[0] - w_ref).abs() < 1e-10);
        // Both steps move by lr·m̂/(√v̂+ε) = lr·g/(|g|+ε) under a constant gradient.
        assert!((w[0] - (1.0 - 2.0 * 1e-3 * 0.5 / (0.5 + 1e-7))).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut opt = Adam::<f32>::new(AdamConfig::default());
        let mut w = [0.0f32; 2];
        assert!(matches!(opt.step(&mut [&mut w[..]], &[&[1.0f32][..]]), Err(Error::Config(_))));
        opt.step(&mut [&mut w[..]], &[&[1.0f32, 1.0][..]]).unwrap();
        let mut w3 = [0.0f32; 3];
        assert!(matches!(opt.step(&mut [&mut w3[..]], &[&[1.0f32; 3][..]]), Err(Error::Config(_))));
    }
}
