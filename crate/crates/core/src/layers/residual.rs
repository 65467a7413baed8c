use super::{missing_cache, Conv2d, Layer, Mode, Param, Relu};
use crate::error::{shape_err, Result};
use crate::norm::Normalizer;
use crate::tensor::Tensor4;

/// Pre-activation basic block:
///
/// ```text
/// a   = relu(norm1(x))
/// out = conv2(relu(norm2(conv1(a)))) + skip
/// ```
///
/// where `skip` is `x`, or `projection(a)` when the block changes width or
/// resolution.
pub struct ResidualBlock {
    pub norm1: Normalizer,
    relu1: Relu,
    pub conv1: Conv2d,
    pub norm2: Normalizer,
    relu2: Relu,
    pub conv2: Conv2d,
    pub projection: Option<Conv2d>,
    ran_forward: bool,
}

impl ResidualBlock {
    pub fn new(
        norm1: Normalizer,
        conv1: Conv2d,
        norm2: Normalizer,
        conv2: Conv2d,
        projection: Option<Conv2d>,
    ) -> Result<Self> {
        let (c1, c2) = (&conv1.params, &conv2.params);
        if c2.in_channels != c1.out_channels {
            return shape_err("residual branch convolutions do not chain");
        }
        let needs_projection = c1.in_channels != c2.out_channels || c1.stride != 1;
        match &projection {
            None if needs_projection => {
                return shape_err("block changes shape but has no projection");
            }
            Some(p)
                if p.params.in_channels != c1.in_channels
                    || p.params.out_channels != c2.out_channels
                    || p.params.stride != c1.stride =>
            {
                return shape_err("projection does not match the residual branch");
            }
            _ => {}
        }
        Ok(Self {
            norm1,
            relu1: Relu::new(),
            conv1,
            norm2,
            relu2: Relu::new(),
            conv2,
            projection,
            ran_forward: false,
        })
    }
}

/// Runs one block forward; see [`ResidualBlock`].
pub fn residual_block_forward(
    x: &Tensor4,
    block: &mut ResidualBlock,
    mode: Mode,
) -> Result<Tensor4> {
    block.forward(x, mode)
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let a = self.relu1.forward(&self.norm1.forward(x, mode)?, mode)?;
        let h = self.conv1.forward(&a, mode)?;
        let h = self.relu2.forward(&self.norm2.forward(&h, mode)?, mode)?;
        let mut out = self.conv2.forward(&h, mode)?;
        match &mut self.projection {
            Some(p) => out.add_assign(&p.forward(&a, mode)?)?,
            None => out.add_assign(x)?,
        }
        self.ran_forward = true;
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        if !self.ran_forward {
            return missing_cache("residual block");
        }
        let g = self.conv2.backward(grad_out)?;
        let g = self.norm2.backward(&self.relu2.backward(&g)?)?;
        let mut da = self.conv1.backward(&g)?;
        if let Some(p) = &mut self.projection {
            da.add_assign(&p.backward(grad_out)?)?;
        }
        let mut dx = self.norm1.backward(&self.relu1.backward(&da)?)?;
        if self.projection.is_none() {
            dx.add_assign(grad_out)?;
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_params(f);
        self.conv1.visit_params(f);
        self.norm2.visit_params(f);
        self.conv2.visit_params(f);
        if let Some(p) = &mut self.projection {
            p.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        self.norm1.visit_buffers(f);
        self.norm2.visit_buffers(f);
    }

    fn visit_normalizers(&self, f: &mut dyn FnMut(&Normalizer)) {
        f(&self.norm1);
        f(&self.norm2);
    }

    fn visit_normalizers_mut(&mut self, f: &mut dyn FnMut(&mut Normalizer)) {
        f(&mut self.norm1);
        f(&mut self.norm2);
    }
}
