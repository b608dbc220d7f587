//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::dense::DenseMatrix;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct MomentPair {
    m: DenseMatrix,
    v: DenseMatrix,
}

/// Optimizer state for a fixed list of parameter tensors. L2 regularization
/// is expected to arrive through the loss, not as decoupled decay.
pub struct Adam {
    config: AdamConfig,
    moments: Vec<MomentPair>,
    step_count: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let moments = shapes
            .iter()
            .map(|&(r, c)| MomentPair {
                m: DenseMatrix::zeros(r, c),
                v: DenseMatrix::zeros(r, c),
            })
            .collect();
        Adam {
            config,
            moments,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn step(&mut self, params: &mut [DenseMatrix], grads: &[DenseMatrix]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment pairs",
                    params.len(),
                    grads.len(),
                    self.moments.len()
                ),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((param, grad), moments) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if param.shape() != grad.shape() || param.shape() != moments.m.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!(
                        "param {:?} vs grad {:?} vs state {:?}",
                        param.shape(),
                        grad.shape(),
                        moments.m.shape()
                    ),
                ));
            }
            let p = param.values_mut();
            let g = grad.values();
            let m = moments.m.values_mut();
            let v = moments.v.values_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
