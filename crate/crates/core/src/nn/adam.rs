use serde::{Deserialize, Serialize};

use super::mlp::{GradBundle, Mlp};
use crate::error::{Result, SqnError};

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: GradBundle,
    v: GradBundle,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: GradBundle::zeros_like(mlp),
            v: GradBundle::zeros_like(mlp),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One descent step. Non-finite gradients leave everything untouched.
    pub fn step(&mut self, mlp: &mut Mlp, grads: &GradBundle) -> Result<()> {
        if !grads.shape_matches(mlp) || !self.m.shape_matches(mlp) {
            return Err(SqnError::InvalidParameter("gradient shape does not match network".into()));
        }
        if !grads.is_finite() {
            return Err(SqnError::NonFinite("gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (li, layer) in mlp.layers_mut().iter_mut().enumerate() {
            let pairs = [
                (&mut layer.weights, &grads.weights[li], &mut self.m.weights[li], &mut self.v.weights[li]),
                (&mut layer.bias, &grads.biases[li], &mut self.m.biases[li], &mut self.v.biases[li]),
            ];
            for (params, g, m, v) in pairs {
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
