//! SGD with momentum and coupled L2 weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 15,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= momentum < 1 and weight_decay >= 0, got {} / {}",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity buffer per parameter, in parameter order.
///
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], cfg: &SgdConfig) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::LengthMismatch {
                left: self.velocity.len(),
                right: params.len(),
            });
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    expected: vec![v.len()],
                    got: p.shape().to_vec(),
                });
            }
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.ok_or_else(|| Error::InvalidArgument("parameter has no gradient".into()))?;
            for ((x, g), vel) in data.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                *vel = cfg.momentum * *vel + *g + cfg.weight_decay * *x;
                *x -= cfg.lr * *vel;
            }
        }
        Ok(())
    }
}
