//! Momentum SGD with L2 weight decay folded into the velocity:
//! v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One parameter update in place. `velocity` carries state between steps
/// and must match the parameter shape.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    cfg: &SgdConfig,
) -> Result<()> {
    cfg.validate()?;
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch {
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    let p = param.data_mut();
    let v = velocity.data_mut();
    for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
        *vv = cfg.momentum * *vv + gv + cfg.weight_decay * *pv;
        *pv -= cfg.lr * *vv;
    }
    Ok(())
}

/// Velocity buffers for a fixed, ordered parameter list.
pub struct SgdState {
    velocities: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        SgdState {
            velocities: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], cfg: &SgdConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocities.len() {
            return Err(Error::InvalidArgument(format!(
                "sgd step over {} params with {} grads and {} velocities",
                params.len(),
                grads.len(),
                self.velocities.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            sgd_step(p, g, v, cfg)?;
        }
        Ok(())
    }
}
