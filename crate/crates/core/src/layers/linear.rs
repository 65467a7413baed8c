use rand::Rng;

use super::{missing_cache, Layer, Mode, Param};
use crate::error::{shape_err, Result};
use crate::gemm::{gemm, Strides};
use crate::tensor::Tensor4;

fn features(x: &Tensor4) -> Result<usize> {
    if x.height() != 1 || x.width() != 1 {
        return shape_err(format!(
            "linear input must be (B, F, 1, 1), got {:?}",
            x.dims()
        ));
    }
    Ok(x.channels())
}

/// `x * weight^T + bias` for `x: B x F`, `weight: K x F`.
pub fn linear_forward(x: &Tensor4, weight: &[f64], bias: &[f64]) -> Result<Tensor4> {
    let f = features(x)?;
    let k = bias.len();
    if weight.len() != k * f {
        return shape_err(format!(
            "weight of {} entries does not match {k} outputs x {f} features",
            weight.len()
        ));
    }
    let b = x.batch();
    let mut out: Vec<f64> = (0..b).flat_map(|_| bias.iter().copied()).collect();
    gemm(
        b,
        f,
        k,
        x.data(),
        Strides::rows(f),
        weight,
        Strides::transposed(f),
        1.0,
        &mut out,
    );
    Tensor4::matrix(b, k, out)
}

/// Fully-connected layer.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor4>,
}

impl Linear {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let out_features = bias.len();
        if out_features == 0 || !weight.len().is_multiple_of(out_features) {
            return shape_err("linear weight must be K x F");
        }
        Ok(Self {
            in_features: weight.len() / out_features,
            out_features,
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        })
    }

    pub fn kaiming<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::kaiming(in_features * out_features, in_features, rng),
            bias: Param::filled(out_features, 0.0),
            in_features,
            out_features,
            input: None,
        }
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let y = linear_forward(x, &self.weight.value, &self.bias.value)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(x) = &self.input else {
            return missing_cache("linear");
        };
        let (b, f, k) = (x.batch(), self.in_features, self.out_features);
        if grad_out.dims() != [b, k, 1, 1] {
            return shape_err(format!("linear upstream gradient {:?}", grad_out.dims()));
        }
        let g = grad_out.data();
        // dW += g^T x
        gemm(
            k,
            b,
            f,
            g,
            Strides::transposed(k),
            x.data(),
            Strides::rows(f),
            1.0,
            &mut self.weight.grad,
        );
        for row in g.chunks(k) {
            for (acc, v) in self.bias.grad.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dx = vec![0.0; b * f];
        gemm(
            b,
            k,
            f,
            g,
            Strides::rows(k),
            &self.weight.value,
            Strides::rows(f),
            0.0,
            &mut dx,
        );
        Tensor4::new(x.dims(), dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
