use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient (coupled weight decay).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction. Moments are kept per parameter, aligned with
/// the [`ParamStore`] the optimizer was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. `lr` gives the learning rate for each parameter name, which
    /// is how parameter groups are expressed. Unreached parameters are
    /// treated as having a zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamGrads,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![self.m.len(), grads.len()],
            });
        }
        for i in 0..params.len() {
            let shape = params.tensor(i).shape();
            if self.m[i].shape() != shape || grads.get(i).is_some_and(|g| g.shape() != shape) {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: shape.to_vec(),
                    right: self.m[i].shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let rate = lr(params.name(i));
            let grad = grads.get(i);
            let theta = params.tensor_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..theta.len() {
                let g = grad.map_or(0.0, |g| g.data()[k]) + weight_decay * theta[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if let Some(i) = (0..params.len()).find(|&i| !params.tensor(i).is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter {} after optimizer step {}",
                params.name(i),
                self.step
            )));
        }
        Ok(())
    }
}
