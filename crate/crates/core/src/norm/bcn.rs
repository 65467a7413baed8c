//! Batch-channel normalization: a batch-knowledge stage followed by a
//! channel-grouped stage.
//!
//! The large-batch form is literally `ChannelNorm` applied to `BatchNorm`.
//! The micro-batch form replaces batch statistics by running estimates that
//! are updated from each batch and excluded from gradient flow, so it works
//! down to batch size 1.

use super::affine::AffineParams;
use super::batch::BatchNorm;
use super::channel::ChannelNorm;
use crate::error::{shape_err, Result};
use crate::layers::{missing_cache, Layer, Mode, Param};
use crate::tensor::Tensor4;

/// `CN(BN(x))`.
pub struct LargeBcn {
    pub bn: BatchNorm,
    pub cn: ChannelNorm,
}

impl LargeBcn {
    pub fn new(bn: BatchNorm, cn: ChannelNorm) -> Self {
        Self { bn, cn }
    }

    pub fn normalized(&self) -> Option<Tensor4> {
        self.cn.normalized()
    }
}

impl Layer for LargeBcn {
    fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let h = self.bn.forward(x, mode)?;
        self.cn.forward(&h, mode)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let g = self.cn.backward(grad_out)?;
        self.bn.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_params(f);
        self.cn.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        self.bn.visit_buffers(f);
    }
}

/// Running per-channel estimates of mean and variance, moved toward each
/// observed batch at rate `rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub mu_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
    pub rate: f64,
    /// Lower bound kept on `sigma2_hat`.
    pub floor: f64,
}

impl EstimatorState {
    /// Starts at `mu_hat = 0`, `sigma2_hat = 1`.
    pub fn new(channels: usize, rate: f64, floor: f64) -> Self {
        Self {
            mu_hat: vec![0.0; channels],
            sigma2_hat: vec![1.0; channels],
            rate,
            floor,
        }
    }

    pub fn channels(&self) -> usize {
        self.mu_hat.len()
    }
}

/// One estimator step. The observed variance is measured around the
/// estimate *before* this step's mean update:
///
/// ```text
/// m_c  = mean(x[., c, ., .])
/// v_c  = mean((x[., c, ., .] - mu_hat_c)^2)
/// mu_hat_c     += r * (m_c - mu_hat_c)
/// sigma2_hat_c += r * (v_c - sigma2_hat_c)
/// ```
pub fn estimator_update(x: &Tensor4, e: &mut EstimatorState) -> Result<()> {
    if x.channels() != e.channels() {
        return shape_err(format!(
            "estimator over {} channels given {}",
            e.channels(),
            x.channels()
        ));
    }
    let (mean, _) = x.channel_moments()?;
    let n = (x.batch() * x.plane_len()) as f64;
    for c in 0..e.channels() {
        let prior = e.mu_hat[c];
        let observed_var = (0..x.batch())
            .flat_map(|b| x.plane(b, c).iter())
            .map(|v| (v - prior) * (v - prior))
            .sum::<f64>()
            / n;
        e.mu_hat[c] += e.rate * (mean[c] - e.mu_hat[c]);
        e.sigma2_hat[c] += e.rate * (observed_var - e.sigma2_hat[c]);
        e.sigma2_hat[c] = e.sigma2_hat[c].max(e.floor);
    }
    Ok(())
}

struct MicroCache {
    standardized: Tensor4,
    inv_sigma: Vec<f64>,
}

/// Micro-batch batch-channel normalization.
pub struct MicroBcn {
    pub estimator: EstimatorState,
    pub affine_b: AffineParams,
    pub cn: ChannelNorm,
    cache: Option<MicroCache>,
}

impl MicroBcn {
    pub fn new(estimator: EstimatorState, cn: ChannelNorm) -> Self {
        let channels = estimator.channels();
        Self {
            estimator,
            affine_b: AffineParams::identity(channels),
            cn,
            cache: None,
        }
    }

    /// `(x - mu_hat) / sigma_hat` from the last forward pass.
    pub fn batch_stage_standardized(&self) -> Option<&Tensor4> {
        self.cache.as_ref().map(|c| &c.standardized)
    }

    pub fn normalized(&self) -> Option<Tensor4> {
        self.cn.normalized()
    }
}

impl Layer for MicroBcn {
    /// Train mode updates the estimates first and then normalizes with the
    /// updated values; eval mode uses them as they are.
    fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        if mode == Mode::Train {
            estimator_update(x, &mut self.estimator)?;
        } else if x.channels() != self.estimator.channels() {
            return shape_err("micro-batch BCN channel mismatch");
        }
        let inv_sigma: Vec<f64> = self
            .estimator
            .sigma2_hat
            .iter()
            .map(|s| 1.0 / s.sqrt())
            .collect();
        let mut standardized = x.clone();
        for b in 0..x.batch() {
            for c in 0..x.channels() {
                let (m, s) = (self.estimator.mu_hat[c], inv_sigma[c]);
                standardized
                    .plane_mut(b, c)
                    .iter_mut()
                    .for_each(|v| *v = (*v - m) * s);
            }
        }
        let xdot = self.affine_b.apply(&standardized)?;
        let y = self.cn.forward(&xdot, mode)?;
        self.cache = Some(MicroCache {
            standardized,
            inv_sigma,
        });
        Ok(y)
    }

    /// The estimates are treated as constants.
    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(cache) = &self.cache else {
            return missing_cache("micro-batch BCN");
        };
        let dxdot = self.cn.backward(grad_out)?;
        let mut dx = self.affine_b.backward(&dxdot, &cache.standardized)?;
        for b in 0..dx.batch() {
            for c in 0..dx.channels() {
                let s = cache.inv_sigma[c];
                dx.plane_mut(b, c).iter_mut().for_each(|g| *g *= s);
            }
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.affine_b.visit(f);
        self.cn.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        f(&mut self.estimator.mu_hat);
        f(&mut self.estimator.sigma2_hat);
    }
}
