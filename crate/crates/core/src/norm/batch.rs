use super::affine::AffineParams;
use crate::error::{shape_err, Error, Result};
use crate::layers::{missing_cache, Layer, Mode, Param};
use crate::tensor::Tensor4;

/// Pre-defined per-channel targets: channels are normalized by their batch
/// statistics and then mapped to mean `mu_hat` and standard deviation
/// `sigma_hat`. Frozen for the lifetime of the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedStats {
    pub mu_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

impl FixedStats {
    pub fn new(mu_hat: Vec<f64>, sigma_hat: Vec<f64>) -> Result<Self> {
        if mu_hat.len() != sigma_hat.len() {
            return shape_err("mu_hat and sigma_hat lengths differ");
        }
        if let Some(s) = sigma_hat.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "sigma_hat must be positive, got {s}"
            )));
        }
        Ok(Self { mu_hat, sigma_hat })
    }

    /// `mu_hat = 0`, `sigma_hat = 1`: plain batch normalization.
    pub fn identity(channels: usize) -> Self {
        Self {
            mu_hat: vec![0.0; channels],
            sigma_hat: vec![1.0; channels],
        }
    }

    pub fn len(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_hat.is_empty()
    }
}

struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Per-channel batch normalization over `{B, H, W}`, optionally retargeted
/// to fixed statistics.
pub struct BatchNorm {
    pub affine: AffineParams,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    fixed: Option<FixedStats>,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            affine: AffineParams::identity(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            fixed: None,
            cache: None,
        }
    }

    /// Fixed-statistics normalization:
    /// `gamma * (sigma_hat * (x - mu) / sigma + mu_hat) + beta`.
    pub fn with_fixed_stats(fixed: FixedStats, eps: f64, momentum: f64) -> Self {
        let mut bn = Self::new(fixed.len(), eps, momentum);
        bn.fixed = Some(fixed);
        bn
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn fixed_stats(&self) -> Option<&FixedStats> {
        self.fixed.as_ref()
    }

    fn retarget(&self, xhat: &Tensor4) -> Tensor4 {
        let Some(f) = &self.fixed else {
            return xhat.clone();
        };
        let mut n = xhat.clone();
        for b in 0..n.batch() {
            for c in 0..n.channels() {
                let (s, m) = (f.sigma_hat[c], f.mu_hat[c]);
                n.plane_mut(b, c).iter_mut().for_each(|v| *v = s * *v + m);
            }
        }
        n
    }

    /// The pre-affine output of the last forward pass.
    pub fn normalized(&self) -> Option<Tensor4> {
        self.cache.as_ref().map(|c| self.retarget(&c.xhat))
    }

    fn check_channels(&self, x: &Tensor4) -> Result<()> {
        if x.channels() != self.channels() {
            return shape_err(format!(
                "batch norm over {} channels given {}",
                self.channels(),
                x.channels()
            ));
        }
        Ok(())
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        self.check_channels(x)?;
        let (mean, var) = match mode {
            Mode::Train => {
                let per_channel = x.batch() * x.plane_len();
                if x.batch() < 2 || per_channel < 2 {
                    return Err(Error::DegenerateBatch {
                        batch: x.batch(),
                        per_channel,
                    });
                }
                let (mean, var) = x.channel_moments()?;
                let m = self.momentum;
                for c in 0..self.channels() {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        for b in 0..x.batch() {
            for c in 0..x.channels() {
                let (m, s) = (mean[c], inv_std[c]);
                xhat.plane_mut(b, c)
                    .iter_mut()
                    .for_each(|v| *v = (*v - m) * s);
            }
        }
        let z = self.affine.apply(&self.retarget(&xhat))?;
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            mode,
        });
        Ok(z)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(cache) = &self.cache else {
            return missing_cache("batch norm");
        };
        let normalized = self.retarget(&cache.xhat);
        let mut dxhat = self.affine.backward(grad_out, &normalized)?;
        let xhat = &cache.xhat;
        let (batch, channels) = (xhat.batch(), xhat.channels());
        for c in 0..channels {
            let scale = self.fixed.as_ref().map_or(1.0, |f| f.sigma_hat[c]);
            let inv = cache.inv_std[c];
            match cache.mode {
                Mode::Eval => {
                    for b in 0..batch {
                        dxhat
                            .plane_mut(b, c)
                            .iter_mut()
                            .for_each(|g| *g *= scale * inv);
                    }
                }
                Mode::Train => {
                    let n = (batch * xhat.plane_len()) as f64;
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for b in 0..batch {
                        for (g, xh) in dxhat.plane(b, c).iter().zip(xhat.plane(b, c)) {
                            sum_g += g * scale;
                            sum_gx += g * scale * xh;
                        }
                    }
                    let (mean_g, mean_gx) = (sum_g / n, sum_gx / n);
                    for b in 0..batch {
                        let xp = xhat.plane(b, c);
                        for (g, xh) in dxhat.plane_mut(b, c).iter_mut().zip(xp) {
                            *g = inv * (*g * scale - mean_g - xh * mean_gx);
                        }
                    }
                }
            }
        }
        Ok(dxhat)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.affine.visit(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
        if let Some(fixed) = &mut self.fixed {
            f(&mut fixed.mu_hat);
            f(&mut fixed.sigma_hat);
        }
    }
}
