use super::affine::AffineParams;
use crate::error::{shape_err, Error, Result};
use crate::layers::{missing_cache, Layer, Mode, Param};
use crate::tensor::{slice_moments, GroupView, Tensor4};

struct CnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
}

/// Channel-grouped normalization: statistics per `(sample, group)` over the
/// group's channels and spatial positions. One group is layer
/// normalization, one channel per group is instance normalization.
pub struct ChannelNorm {
    pub groups: usize,
    pub eps: f64,
    /// Per-channel, or per-group when used as the second stage of
    /// batch-channel normalization.
    pub affine: AffineParams,
    cache: Option<CnCache>,
}

impl ChannelNorm {
    pub fn new(channels: usize, groups: usize, eps: f64) -> Result<Self> {
        Self::with_affine(channels, groups, eps, AffineParams::identity(channels))
    }

    /// One `(gamma, beta)` pair per group.
    pub fn per_group(channels: usize, groups: usize, eps: f64) -> Result<Self> {
        Self::with_affine(channels, groups, eps, AffineParams::identity(groups))
    }

    fn with_affine(channels: usize, groups: usize, eps: f64, affine: AffineParams) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidGrouping { channels, groups });
        }
        Ok(Self {
            groups,
            eps,
            affine,
            cache: None,
        })
    }

    pub fn layer_norm(channels: usize, eps: f64) -> Result<Self> {
        Self::new(channels, 1, eps)
    }

    pub fn instance_norm(channels: usize, eps: f64) -> Result<Self> {
        Self::new(channels, channels, eps)
    }

    pub fn normalized(&self) -> Option<Tensor4> {
        self.cache.as_ref().map(|c| c.xhat.clone())
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        self.affine.channels_per_entry(x.channels())?;
        let per_group = x.channels() / self.groups.max(1) * x.plane_len();
        if per_group < 2 {
            return Err(Error::DegenerateGroup(format!(
                "{} values per group in {:?} with {} groups",
                per_group,
                x.dims(),
                self.groups
            )));
        }
        Ok(())
    }
}

impl Layer for ChannelNorm {
    fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let mut view = GroupView::new(x.clone(), self.groups)?;
        self.check(x)?;
        let mut inv_std = Vec::with_capacity(x.batch() * self.groups);
        for b in 0..x.batch() {
            for g in 0..self.groups {
                let slice = view.group_mut(b, g);
                let (mean, var) = slice_moments(slice);
                let inv = 1.0 / (var + self.eps).sqrt();
                slice.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
        }
        let xhat = view.into_tensor();
        let z = self.affine.apply(&xhat)?;
        self.cache = Some(CnCache { xhat, inv_std });
        Ok(z)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(cache) = &self.cache else {
            return missing_cache("channel norm");
        };
        if grad_out.dims() != cache.xhat.dims() {
            return shape_err(format!(
                "channel norm upstream gradient {:?}",
                grad_out.dims()
            ));
        }
        let dxhat = self.affine.backward(grad_out, &cache.xhat)?;
        let mut dx = GroupView::new(dxhat, self.groups)?;
        let xhat = GroupView::new(cache.xhat.clone(), self.groups)?;
        let n = xhat.group_len() as f64;
        for b in 0..xhat.dims()[0] {
            for g in 0..self.groups {
                let inv = cache.inv_std[b * self.groups + g];
                let xs = xhat.group(b, g);
                let gs = dx.group_mut(b, g);
                let mean_g = gs.iter().sum::<f64>() / n;
                let mean_gx = gs.iter().zip(xs).map(|(a, x)| a * x).sum::<f64>() / n;
                for (gv, xv) in gs.iter_mut().zip(xs) {
                    *gv = inv * (*gv - mean_g - xv * mean_gx);
                }
            }
        }
        Ok(dx.into_tensor())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.affine.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_channel_layer_norm() {
        let x = Tensor4::new([1, 2, 1, 1], vec![0.0, 2.0]).unwrap();
        let mut ln = ChannelNorm::layer_norm(2, 0.0).unwrap();
        assert_eq!(ln.forward(&x, Mode::Train).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_group_is_zero() {
        let x = Tensor4::full([2, 4, 3, 3], -3.5);
        let mut gn = ChannelNorm::new(4, 2, 1e-5).unwrap();
        let y = gn.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_group_is_degenerate() {
        let mut inorm = ChannelNorm::instance_norm(3, 1e-5).unwrap();
        let err = inorm
            .forward(&Tensor4::zeros([2, 3, 1, 1]), Mode::Train)
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateGroup(_)));
    }

    #[test]
    fn grouping_must_divide() {
        assert!(ChannelNorm::new(6, 4, 1e-5).is_err());
    }

    #[test]
    fn per_group_affine() {
        let x = Tensor4::new([1, 4, 1, 1], vec![0.0, 2.0, 5.0, 7.0]).unwrap();
        let mut cn = ChannelNorm::per_group(4, 2, 0.0).unwrap();
        cn.affine.gamma.value = vec![2.0, 1.0];
        cn.affine.beta.value = vec![0.0, 10.0];
        let y = cn.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[-2.0, 2.0, 9.0, 11.0]);
    }

    /// Lower-mean channel sharing a group with a higher-mean channel ends up
    /// mostly below zero after normalization.
    #[test]
    fn dominated_channel_is_mostly_negative() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Tensor4::randn([8, 2, 8, 8], &mut rng);
        let x = Tensor4::from_fn([8, 2, 8, 8], |b, c, h, w| {
            let base = if c == 0 { -1.0 } else { 1.0 };
            base + 0.5 * noise.get(b, c, h, w)
        });
        let mut ln = ChannelNorm::layer_norm(2, 1e-5).unwrap();
        let y = ln.forward(&x, Mode::Train).unwrap();
        let frac_pos = |c: usize| {
            let vals: Vec<f64> = (0..8).flat_map(|b| y.plane(b, c).to_vec()).collect();
            vals.iter().filter(|&&v| v > 0.0).count() as f64 / vals.len() as f64
        };
        assert!(
            frac_pos(0) < 0.1,
            "low channel positive fraction {}",
            frac_pos(0)
        );
        assert!(frac_pos(1) > 0.9);
    }
}
