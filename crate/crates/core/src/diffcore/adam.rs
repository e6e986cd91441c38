use super::graph::{ParamGraph, ParamId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    params: Vec<ParamId>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(graph: &ParamGraph, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let first: Vec<Tensor> = params.iter().map(|&p| Tensor::zeros(graph.param_value(p).shape())).collect();
        let second = first.clone();
        Self {
            config,
            params,
            first,
            second,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every parameter of the group and
    /// zeroes their gradients. A non-finite gradient aborts the step before
    /// anything is modified.
    pub fn step(&mut self, graph: &mut ParamGraph) -> Result<()> {
        for &p in &self.params {
            if !graph.param_grad(p).is_finite() {
                return Err(Error::NonFinite(format!("gradient of '{}'", graph.param_name(p))));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, &p) in self.params.iter().enumerate() {
            let (value, grad) = graph.param_value_and_grad_mut(p);
            let (m, v) = (self.first[k].data_mut(), self.second[k].data_mut());
            for i in 0..grad.len() {
                let g = grad.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}
