use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

/// Plain SGD with optional momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidInput(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!("momentum {}", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidInput(format!(
                "weight decay {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`. With zero
/// momentum this is `w <- w - lr * (g + wd * w)`.
pub fn sgd_step(param: &mut Param, cfg: &SgdConfig) {
    let Param {
        value,
        grad,
        velocity,
    } = param;
    for ((w, g), v) in value.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
        let d = g + cfg.weight_decay * *w;
        if cfg.momentum > 0.0 {
            *v = cfg.momentum * *v + d;
            *w -= cfg.lr * *v;
        } else {
            *w -= cfg.lr * d;
        }
    }
}
