//! First-order optimizers over lists of parameter matrices.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;

/// Optimizer choice and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, new: f64) {
        match self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => *lr = new,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::contract("lr must be positive and finite"));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::contract("adam betas must lie in [0, 1)"));
            }
            if !(eps > 0.0) {
                return Err(Error::contract("adam eps must be positive"));
            }
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter shapes.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[&Matrix]) -> Result<Self> {
        config.validate()?;
        let zeros = |_: ()| params.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let (first, second) = match config {
            OptimizerConfig::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerConfig::Adam { .. } => (zeros(()), zeros(())),
        };
        Ok(Optimizer {
            config,
            step: 0,
            first,
            second,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("parameter and gradient counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.add_scaled_assign(g, -lr);
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if self.first.len() != params.len() {
                    return Err(Error::contract("parameter count changed between steps"));
                }
                let t = self.step as i32;
                let c1 = 1.0 - math::powi(beta1, t);
                let c2 = 1.0 - math::powi(beta2, t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let pd = p.data_mut();
                    for (((w, gi), mi), vi) in pd
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (math::sqrt(v_hat) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
