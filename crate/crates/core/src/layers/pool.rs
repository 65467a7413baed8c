use super::{missing_cache, Layer, Mode};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

/// 2x2 average pooling with stride 2.
pub fn avgpool2_forward(x: &Tensor4) -> Result<Tensor4> {
    let [b, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("avgpool2 needs even spatial dims, got {h}x{w}"));
    }
    Ok(Tensor4::from_fn([b, c, h / 2, w / 2], |bi, ci, y, xx| {
        let p = x.plane(bi, ci);
        let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
        0.25 * (p[r0 + 2 * xx] + p[r0 + 2 * xx + 1] + p[r1 + 2 * xx] + p[r1 + 2 * xx + 1])
    }))
}

/// Mean over `H x W`, returned as a `(B, C, 1, 1)` matrix.
pub fn global_avgpool_forward(x: &Tensor4) -> Result<Tensor4> {
    let [b, c, h, w] = x.dims();
    if h * w == 0 || b * c == 0 {
        return shape_err(format!("global pooling of empty tensor {:?}", x.dims()));
    }
    let n = (h * w) as f64;
    Ok(Tensor4::from_fn([b, c, 1, 1], |bi, ci, _, _| {
        x.plane(bi, ci).iter().sum::<f64>() / n
    }))
}

#[derive(Default)]
pub struct AvgPool2 {
    input_dims: Option<[usize; 4]>,
}

impl AvgPool2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for AvgPool2 {
    fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let y = avgpool2_forward(x)?;
        self.input_dims = Some(x.dims());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(dims) = self.input_dims else {
            return missing_cache("avgpool2");
        };
        let [b, c, h, w] = dims;
        if grad_out.dims() != [b, c, h / 2, w / 2] {
            return shape_err(format!("avgpool2 upstream gradient {:?}", grad_out.dims()));
        }
        Ok(Tensor4::from_fn(dims, |bi, ci, y, x| {
            0.25 * grad_out.get(bi, ci, y / 2, x / 2)
        }))
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    input_dims: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let y = global_avgpool_forward(x)?;
        self.input_dims = Some(x.dims());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(dims) = self.input_dims else {
            return missing_cache("global_avgpool");
        };
        let [b, c, h, w] = dims;
        if grad_out.dims() != [b, c, 1, 1] {
            return shape_err(format!(
                "global pool upstream gradient {:?}",
                grad_out.dims()
            ));
        }
        let n = (h * w) as f64;
        Ok(Tensor4::from_fn(dims, |bi, ci, _, _| {
            grad_out.get(bi, ci, 0, 0) / n
        }))
    }
}
