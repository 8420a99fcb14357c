use serde::{Deserialize, Serialize};

use super::params::{GradStore, ParamStore};
use super::tensor::Scalar;
use super::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments, one pair per parameter scalar.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new<S: Scalar>(params: &ParamStore<S>, config: AdamConfig) -> Self {
        let n = params.len();
        Self { config, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update<S: Scalar>(&mut self, params: &mut ParamStore<S>, grads: &GradStore<S>) -> Result<(), NeuralError> {
        if !grads.is_congruent(params) || self.m.len() != params.len() {
            return Err(NeuralError::Shape("adam: gradients do not match the parameter layout".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grads.values()).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let upd = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p = S::of(p.as_f64() - upd);
        }
        Ok(())
    }
}
