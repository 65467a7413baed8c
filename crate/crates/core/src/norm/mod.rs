//! Normalization layers and the closed set of normalizer kinds exposed to
//! configuration.

mod affine;
mod batch;
mod bcn;
mod channel;
pub mod ws;

pub use affine::{affine_forward, Affine, AffineParams};
pub use batch::{BatchNorm, FixedStats};
pub use bcn::{estimator_update, EstimatorState, LargeBcn, MicroBcn};
pub use channel::ChannelNorm;
pub use ws::{ws_standardize, WS_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::tensor::Tensor4;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Estimator rate used until the training loop supplies its learning rate.
pub const DEFAULT_UPDATE_RATE: f64 = 0.1;

/// `min(32, C / 4)`, at least 1, lowered until it divides `C`.
pub fn default_groups(channels: usize) -> usize {
    let mut g = (channels / 4).clamp(1, 32);
    while !channels.is_multiple_of(g) {
        g -= 1;
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Bn,
    Ln,
    Gn,
    In,
    Fixed,
    BcnLarge,
    BcnMicro,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Ln => "ln",
            NormKind::Gn => "gn",
            NormKind::In => "in",
            NormKind::Fixed => "fixed",
            NormKind::BcnLarge => "bcn-large",
            NormKind::BcnMicro => "bcn-micro",
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bn" => NormKind::Bn,
            "ln" => NormKind::Ln,
            "gn" => NormKind::Gn,
            "in" => NormKind::In,
            "fixed" => NormKind::Fixed,
            "bcn-large" => NormKind::BcnLarge,
            "bcn-micro" => NormKind::BcnMicro,
            other => return Err(Error::InvalidInput(format!("unknown normalizer {other:?}"))),
        })
    }
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

/// Normalizer selection as it appears in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Group count for grouped kinds; defaults to [`default_groups`].
    #[serde(default)]
    pub groups: Option<usize>,
    /// Weight standardization of the preceding convolutions. Defaults to on
    /// for batch-channel kinds and off otherwise.
    #[serde(default)]
    pub ws: Option<bool>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Micro-batch estimator rate; `None` follows the learning rate.
    #[serde(default)]
    pub update_rate: Option<f64>,
    /// Spread of the fixed-statistics targets (`fixed` kind only).
    #[serde(default)]
    pub sigma_mu: f64,
    #[serde(default)]
    pub sigma_sigma: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            groups: None,
            ws: None,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            update_rate: None,
            sigma_mu: 0.0,
            sigma_sigma: 0.0,
        }
    }

    pub fn with_ws(mut self, ws: bool) -> Self {
        self.ws = Some(ws);
        self
    }

    pub fn ws_enabled(&self) -> bool {
        self.ws
            .unwrap_or(matches!(self.kind, NormKind::BcnLarge | NormKind::BcnMicro))
    }

    /// Short label such as `gn+ws`.
    pub fn label(&self) -> String {
        if self.ws_enabled() {
            format!("{}+ws", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        match self.kind {
            NormKind::Ln | NormKind::Bn | NormKind::Fixed => 1,
            NormKind::In => channels,
            NormKind::Gn | NormKind::BcnLarge | NormKind::BcnMicro => {
                self.groups.unwrap_or_else(|| default_groups(channels))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidInput(format!("{what} = {v}")));
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", self.eps);
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return bad("momentum", self.momentum);
        }
        if let Some(r) = self.update_rate {
            if !(0.0..=1.0).contains(&r) {
                return bad("update_rate", r);
            }
        }
        if !(self.sigma_mu >= 0.0 && self.sigma_mu.is_finite()) {
            return bad("sigma_mu", self.sigma_mu);
        }
        if !(self.sigma_sigma >= 0.0 && self.sigma_sigma.is_finite()) {
            return bad("sigma_sigma", self.sigma_sigma);
        }
        if self.groups == Some(0) {
            return Err(Error::InvalidInput("groups must be positive".into()));
        }
        Ok(())
    }

    /// Builds a normalizer over `channels`. `fixed` supplies the targets of
    /// the `fixed` kind; without it the identity targets are used.
    pub fn build(&self, channels: usize, fixed: Option<FixedStats>) -> Result<Normalizer> {
        self.validate()?;
        let g = self.groups_for(channels);
        let layer = match self.kind {
            NormKind::Bn => NormLayer::Batch(BatchNorm::new(channels, self.eps, self.momentum)),
            NormKind::Fixed => {
                let fixed = fixed.unwrap_or_else(|| FixedStats::identity(channels));
                if fixed.len() != channels {
                    return Err(Error::InvalidShape(format!(
                        "{} fixed statistics for {channels} channels",
                        fixed.len()
                    )));
                }
                NormLayer::Batch(BatchNorm::with_fixed_stats(fixed, self.eps, self.momentum))
            }
            NormKind::Ln | NormKind::Gn | NormKind::In => {
                NormLayer::Channel(ChannelNorm::new(channels, g, self.eps)?)
            }
            NormKind::BcnLarge => NormLayer::BcnLarge(LargeBcn::new(
                BatchNorm::new(channels, self.eps, self.momentum),
                ChannelNorm::per_group(channels, g, self.eps)?,
            )),
            NormKind::BcnMicro => NormLayer::BcnMicro(MicroBcn::new(
                EstimatorState::new(
                    channels,
                    self.update_rate.unwrap_or(DEFAULT_UPDATE_RATE),
                    self.eps,
                ),
                ChannelNorm::per_group(channels, g, self.eps)?,
            )),
        };
        Ok(Normalizer::new(layer, g))
    }
}

pub enum NormLayer {
    /// Batch normalization, with or without fixed targets.
    Batch(BatchNorm),
    Channel(ChannelNorm),
    BcnLarge(LargeBcn),
    BcnMicro(MicroBcn),
}

impl NormLayer {
    fn as_layer(&mut self) -> &mut dyn Layer {
        match self {
            NormLayer::Batch(l) => l,
            NormLayer::Channel(l) => l,
            NormLayer::BcnLarge(l) => l,
            NormLayer::BcnMicro(l) => l,
        }
    }
}

/// A normalizer plus optional capture of its input and output, used by the
/// diagnostics to tap the network between convolution, normalization and
/// ReLU.
pub struct Normalizer {
    layer: NormLayer,
    groups: usize,
    tapping: bool,
    last_input: Option<Tensor4>,
    last_output: Option<Tensor4>,
}

impl Normalizer {
    pub fn new(layer: NormLayer, groups: usize) -> Self {
        Self {
            layer,
            groups,
            tapping: false,
            last_input: None,
            last_output: None,
        }
    }

    pub fn layer(&self) -> &NormLayer {
        &self.layer
    }

    pub fn layer_mut(&mut self) -> &mut NormLayer {
        &mut self.layer
    }

    /// Grouping under which channels are normalized together.
    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn set_tapping(&mut self, on: bool) {
        self.tapping = on;
        if !on {
            self.last_input = None;
            self.last_output = None;
        }
    }

    /// Input of the last forward pass, when tapping.
    pub fn last_input(&self) -> Option<&Tensor4> {
        self.last_input.as_ref()
    }

    /// Post-affine output of the last forward pass, when tapping.
    pub fn last_output(&self) -> Option<&Tensor4> {
        self.last_output.as_ref()
    }

    /// Output of the last forward pass before the learned affine transform
    /// (the channel stage's, for batch-channel kinds).
    pub fn normalized(&self) -> Option<Tensor4> {
        match &self.layer {
            NormLayer::Batch(l) => l.normalized(),
            NormLayer::Channel(l) => l.normalized(),
            NormLayer::BcnLarge(l) => l.normalized(),
            NormLayer::BcnMicro(l) => l.normalized(),
        }
    }

    pub fn set_update_rate(&mut self, rate: f64) {
        if let NormLayer::BcnMicro(l) = &mut self.layer {
            l.estimator.rate = rate;
        }
    }
}

impl Layer for Normalizer {
    fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let y = self.layer.as_layer().forward(x, mode)?;
        if self.tapping {
            self.last_input = Some(x.clone());
            self.last_output = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        self.layer.as_layer().backward(grad_out)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layer.as_layer().visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        self.layer.as_layer().visit_buffers(f);
    }

    fn visit_normalizers(&self, f: &mut dyn FnMut(&Normalizer)) {
        f(self);
    }

    fn visit_normalizers_mut(&mut self, f: &mut dyn FnMut(&mut Normalizer)) {
        f(self);
    }
}
