use crate::scalar::Scalar;

use super::{EngineError, Parameter};

/// SGD with classical momentum and L2 weight decay.
///
/// v <- momentum * v + (g + wd * w);  w <- w - lr * v
///
/// With momentum = 0 this reduces to w <- w - lr * (g + wd * w).
pub struct Sgd<S> {
    lr: S,
    momentum: S,
    weight_decay: S,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self, EngineError> {
        if lr <= 0.0 {
            return Err(EngineError::Config(format!("sgd lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(EngineError::Config(format!("sgd momentum must be in [0,1), got {momentum}")));
        }
        Ok(Sgd {
            lr: S::from_f64(lr),
            momentum: S::from_f64(momentum),
            weight_decay: S::from_f64(weight_decay),
            velocity: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = S::from_f64(lr);
    }

    pub fn lr(&self) -> f64 {
        self.lr.as_f64()
    }

    /// Apply one update using each parameter's accumulated gradient.
    /// Parameters without a gradient are treated as zero-gradient.
    pub fn step(&mut self, params: &mut [Parameter<S>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect();
        }
        debug_assert_eq!(self.velocity.len(), params.len());
        for (param, vel) in params.iter_mut().zip(&mut self.velocity) {
            let has_grad = param.tensor.grad().is_some();
            let n = param.tensor.numel();
            for i in 0..n {
                let g = if has_grad { param.tensor.grad().unwrap()[i] } else { S::zero() };
                let w = param.tensor.values()[i];
                let update = g + self.weight_decay * w;
                vel[i] = self.momentum * vel[i] + update;
                param.tensor.values_mut()[i] = w - self.lr * vel[i];
            }
        }
    }
}
