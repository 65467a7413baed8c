//! Differentiable layers, the sequential graph that chains them, and the
//! training primitives built on top.
//!
//! Every layer caches whatever its backward pass needs during `forward`, and
//! `backward` accumulates parameter gradients into [`Param::grad`].

mod activation;
mod conv;
mod gradcheck;
mod linear;
mod loss;
mod pool;
mod residual;
mod sgd;

pub use activation::{relu_forward, Relu};
pub use conv::{conv2d_forward, Conv2d, ConvParams};
pub use gradcheck::{
    gradcheck, gradcheck_scalar, relative_error, GradcheckOptions, GradcheckReport,
    DEFAULT_GRADCHECK_STEP, DEFAULT_GRADCHECK_TOLERANCE,
};
pub use linear::{linear_forward, Linear};
pub use loss::softmax_xent;
pub use pool::{avgpool2_forward, global_avgpool_forward, AvgPool2, GlobalAvgPool};
pub use residual::{residual_block_forward, ResidualBlock};
pub use sgd::{sgd_step, SgdConfig};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::norm::Normalizer;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable parameter with its gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub(crate) velocity: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Self::new(vec![v; len])
    }

    /// Gaussian entries with standard deviation `sqrt(2 / fan_in)`.
    pub fn kaiming<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Self::new(
            (0..len)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// A node of the computation graph.
pub trait Layer: Send {
    fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4>;

    /// Propagates `grad_out` to the input of the most recent `forward`,
    /// accumulating parameter gradients along the way.
    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4>;

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    /// Non-learned state that belongs in a checkpoint (running statistics,
    /// fixed targets, estimates).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>)) {}

    fn visit_normalizers(&self, _f: &mut dyn FnMut(&Normalizer)) {}

    fn visit_normalizers_mut(&mut self, _f: &mut dyn FnMut(&mut Normalizer)) {}

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

pub(crate) fn missing_cache<T>(layer: &str) -> Result<T> {
    Err(Error::InvalidInput(format!(
        "{layer}: backward called before forward"
    )))
}

/// An ordered chain of layers; backward walks the chain in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Box<dyn Layer>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.nodes.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    pub fn sgd_step(&mut self, cfg: &SgdConfig) {
        self.visit_params(&mut |p| sgd_step(p, cfg));
    }
}

impl Layer for Graph {
    fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let mut nodes = self.nodes.iter_mut();
        let Some(first) = nodes.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode)?;
        for node in nodes {
            h = node.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let mut g = grad_out.clone();
        for node in self.nodes.iter_mut().rev() {
            g = node.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for node in &mut self.nodes {
            node.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        for node in &mut self.nodes {
            node.visit_buffers(f);
        }
    }

    fn visit_normalizers(&self, f: &mut dyn FnMut(&Normalizer)) {
        for node in &self.nodes {
            node.visit_normalizers(f);
        }
    }

    fn visit_normalizers_mut(&mut self, f: &mut dyn FnMut(&mut Normalizer)) {
        for node in &mut self.nodes {
            node.visit_normalizers_mut(f);
        }
    }
}
