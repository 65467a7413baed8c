//! The two experiment networks and the fixed-statistics sampler.

use normlab_core::layers::{
    AvgPool2, Conv2d, ConvParams, GlobalAvgPool, Graph, Linear, Relu, ResidualBlock,
};
use normlab_core::norm::{FixedStats, NormKind, NormSpec, Normalizer, WS_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CHANNELS, CLASSES};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `stages x [conv3x3(width) -> norm -> relu -> avgpool2] -> gap -> fc`.
    Plain4 {
        #[serde(default = "default_plain_width")]
        width: usize,
        #[serde(default = "default_plain_stages")]
        stages: usize,
    },
    /// Pre-activation basic-block network with three stages of widths
    /// `width`, `2 width`, `4 width`.
    Miniresnet {
        #[serde(default = "default_blocks")]
        blocks_per_stage: usize,
        #[serde(default = "default_resnet_width")]
        width: usize,
    },
}

fn default_plain_width() -> usize {
    32
}

fn default_plain_stages() -> usize {
    4
}

fn default_blocks() -> usize {
    3
}

fn default_resnet_width() -> usize {
    16
}

impl ModelSpec {
    pub fn plain4() -> Self {
        ModelSpec::Plain4 {
            width: default_plain_width(),
            stages: default_plain_stages(),
        }
    }

    pub fn miniresnet(blocks_per_stage: usize) -> Self {
        ModelSpec::Miniresnet {
            blocks_per_stage,
            width: default_resnet_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Plain4 { width, stages } if width == 0 || stages == 0 => {
                config_err("plain4 needs positive width and stages")
            }
            ModelSpec::Miniresnet {
                blocks_per_stage,
                width,
            } if blocks_per_stage == 0 || width == 0 => {
                config_err("miniresnet needs positive width and blocks")
            }
            _ => Ok(()),
        }
    }

    /// Smallest image side the network accepts is a multiple of this.
    pub fn side_multiple(&self) -> usize {
        match *self {
            ModelSpec::Plain4 { stages, .. } => 1 << stages,
            ModelSpec::Miniresnet { .. } => 4,
        }
    }
}

/// `mu_hat_c ~ N(0, sigma_mu)`, `sigma_hat_c = exp(g_c)` with
/// `g_c ~ N(0, sigma_sigma)`.
pub fn sample_fixed_stats(
    channels: usize,
    sigma_mu: f64,
    sigma_sigma: f64,
    seed: u64,
) -> FixedStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu_hat = Vec::with_capacity(channels);
    let mut sigma_hat = Vec::with_capacity(channels);
    for _ in 0..channels {
        let m: f64 = rng.sample(StandardNormal);
        let g: f64 = rng.sample(StandardNormal);
        mu_hat.push(sigma_mu * m);
        sigma_hat.push((sigma_sigma * g).exp());
    }
    FixedStats { mu_hat, sigma_hat }
}

/// Seed of the fixed statistics of normalizer `layer` in a run seeded
/// with `run_seed`. Kept apart from the weight initialization stream so the
/// zero-spread case initializes exactly like batch normalization.
pub fn fixed_stats_seed(run_seed: u64, layer: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(0x5851_f42d_4c95_7f2d)
        .wrapping_add(layer as u64)
}

struct Builder<'a> {
    norm: &'a NormSpec,
    rng: ChaCha8Rng,
    seed: u64,
    norms: usize,
}

impl Builder<'_> {
    fn conv(&mut self, out: usize, inp: usize, kernel: usize, stride: usize) -> Result<Conv2d> {
        let p = ConvParams::kaiming(out, inp, kernel, stride, kernel / 2, false, &mut self.rng)?;
        let conv = Conv2d::new(p);
        Ok(if self.norm.ws_enabled() {
            conv.with_weight_standardization(WS_EPS)
        } else {
            conv
        })
    }

    fn norm(&mut self, channels: usize) -> Result<Normalizer> {
        let fixed = (self.norm.kind == NormKind::Fixed).then(|| {
            sample_fixed_stats(
                channels,
                self.norm.sigma_mu,
                self.norm.sigma_sigma,
                fixed_stats_seed(self.seed, self.norms),
            )
        });
        self.norms += 1;
        Ok(self.norm.build(channels, fixed)?)
    }
}

/// Builds the network for `CHANNELS`-channel images and `CLASSES` logits.
/// Weights come from a stream seeded by `seed`.
pub fn build_model(spec: &ModelSpec, norm: &NormSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    norm.validate()?;
    let mut b = Builder {
        norm,
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        norms: 0,
    };
    let mut g = Graph::new();
    match *spec {
        ModelSpec::Plain4 { width, stages } => {
            let mut inp = CHANNELS;
            for _ in 0..stages {
                g.push(b.conv(width, inp, 3, 1)?);
                g.push(b.norm(width)?);
                g.push(Relu::new());
                g.push(AvgPool2::new());
                inp = width;
            }
            g.push(GlobalAvgPool::new());
            g.push(Linear::kaiming(width, CLASSES, &mut b.rng));
        }
        ModelSpec::Miniresnet {
            blocks_per_stage,
            width,
        } => {
            g.push(b.conv(width, CHANNELS, 3, 1)?);
            let mut inp = width;
            for stage in 0..3 {
                let out = width << stage;
                for block in 0..blocks_per_stage {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let norm1 = b.norm(inp)?;
                    let conv1 = b.conv(out, inp, 3, stride)?;
                    let norm2 = b.norm(out)?;
                    let conv2 = b.conv(out, out, 3, 1)?;
                    let projection = if stride != 1 || inp != out {
                        Some(b.conv(out, inp, 1, stride)?)
                    } else {
                        None
                    };
                    g.push(ResidualBlock::new(norm1, conv1, norm2, conv2, projection)?);
                    inp = out;
                }
            }
            g.push(b.norm(inp)?);
            g.push(Relu::new());
            g.push(GlobalAvgPool::new());
            g.push(Linear::kaiming(inp, CLASSES, &mut b.rng));
        }
    }
    Ok(g)
}
