use serde::{Deserialize, Serialize};

use super::Real;

/// Adaptive-moment optimiser settings. Weight decay is the coupled L2 form
/// (added to the gradient before the moment updates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self { config, state: AdamState { step: 0, m: vec![T::zero(); n_params], v: vec![T::zero(); n_params] } }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.state.m.len(), "optimizer parameter count");
        assert_eq!(params.len(), grads.len(), "gradient length");
        let c = &self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
        let one = T::one();
        for i in 0..params.len() {
            let g = grads[i] + wd * params[i];
            let m = b1 * self.state.m[i] + (one - b1) * g;
            let v = b2 * self.state.v[i] + (one - b2) * g * g;
            self.state.m[i] = m;
            self.state.v[i] = v;
            params[i] = params[i] - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        }
    }
}
