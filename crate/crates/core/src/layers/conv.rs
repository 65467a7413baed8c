use rand::Rng;

use super::{missing_cache, Layer, Mode, Param};
use crate::error::{shape_err, Error, Result};
use crate::gemm::{gemm, Strides};
use crate::norm::ws::{standardize_rows, standardize_rows_backward, RowStandardization};
use crate::tensor::Tensor4;

/// Convolution weights `O x I x k x k` plus optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Param,
    pub bias: Option<Param>,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || out_channels == 0 || in_channels == 0 || stride == 0 {
            return shape_err(format!(
                "conv {out_channels}x{in_channels}x{kernel}x{kernel} stride {stride}: kernel must be odd and extents positive"
            ));
        }
        Ok(Self {
            weight: Param::filled(out_channels * in_channels * kernel * kernel, 0.0),
            bias: bias.then(|| Param::filled(out_channels, 0.0)),
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Fan-in scaled Gaussian weights, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(out_channels, in_channels, kernel, stride, padding, bias)?;
        p.weight = Param::kaiming(p.weight.len(), p.fan_in(), rng);
        Ok(p)
    }

    /// Length of one flattened output-channel row, `I * k * k`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return shape_err(format!("input {h}x{w} too small for kernel {k}"));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    fn check_input(&self, x: &Tensor4) -> Result<(usize, usize)> {
        if x.channels() != self.in_channels {
            return shape_err(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            ));
        }
        self.output_hw(x.height(), x.width())
    }
}

/// Unrolls sample `b` into a `(I*k*k) x (Ho*Wo)` patch matrix.
fn im2col(x: &Tensor4, b: usize, p: &ConvParams, ho: usize, wo: usize, cols: &mut [f64]) {
    let (h, w, k, s) = (x.height() as isize, x.width() as isize, p.kernel, p.stride);
    let pad = p.padding as isize;
    let npix = ho * wo;
    for ci in 0..p.in_channels {
        let plane = x.plane(b, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *d = if ix < 0 || ix >= w {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto sample `b` of `dx`.
fn col2im(cols: &[f64], dx: &mut Tensor4, b: usize, p: &ConvParams, ho: usize, wo: usize) {
    let (h, w, k, s) = (
        dx.height() as isize,
        dx.width() as isize,
        p.kernel,
        p.stride,
    );
    let pad = p.padding as isize;
    let npix = ho * wo;
    for ci in 0..p.in_channels {
        let plane = dx.plane_mut(b, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_with_weight(x: &Tensor4, p: &ConvParams, weight: &[f64]) -> Result<Tensor4> {
    let (ho, wo) = p.check_input(x)?;
    let (o, kk, npix) = (p.out_channels, p.fan_in(), ho * wo);
    let mut out = Tensor4::zeros([x.batch(), o, ho, wo]);
    let mut cols = vec![0.0; kk * npix];
    for b in 0..x.batch() {
        im2col(x, b, p, ho, wo, &mut cols);
        let dst = &mut out.data_mut()[b * o * npix..(b + 1) * o * npix];
        gemm(
            o,
            kk,
            npix,
            weight,
            Strides::rows(kk),
            &cols,
            Strides::rows(npix),
            0.0,
            dst,
        );
        if let Some(bias) = &p.bias {
            for (c, plane) in dst.chunks_mut(npix).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias.value[c]);
            }
        }
    }
    Ok(out)
}

/// Cross-correlation with zero padding; output extent
/// `(H + 2p - k) / stride + 1`.
pub fn conv2d_forward(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    conv_with_weight(x, p, &p.weight.value)
}

struct ConvCache {
    input: Tensor4,
    weight: Vec<f64>,
    ws: Option<RowStandardization>,
}

/// Convolution layer, optionally reparameterized by weight standardization.
pub struct Conv2d {
    pub params: ConvParams,
    ws_eps: Option<f64>,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(params: ConvParams) -> Self {
        Self {
            params,
            ws_eps: None,
            cache: None,
        }
    }

    /// Standardizes each output row of the raw weight on every forward pass.
    pub fn with_weight_standardization(mut self, eps: f64) -> Self {
        self.ws_eps = Some(eps);
        self
    }

    pub fn is_standardized(&self) -> bool {
        self.ws_eps.is_some()
    }

    /// The weight actually applied to the input.
    pub fn effective_weight(&self) -> Result<Vec<f64>> {
        match self.ws_eps {
            Some(eps) => {
                Ok(standardize_rows(&self.params.weight.value, self.params.out_channels, eps)?.0)
            }
            None => Ok(self.params.weight.value.clone()),
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let (weight, ws) = match self.ws_eps {
            Some(eps) => {
                let (w, cache) =
                    standardize_rows(&self.params.weight.value, self.params.out_channels, eps)?;
                (w, Some(cache))
            }
            None => (self.params.weight.value.clone(), None),
        };
        let y = conv_with_weight(x, &self.params, &weight)?;
        self.cache = Some(ConvCache {
            input: x.clone(),
            weight,
            ws,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(cache) = &self.cache else {
            return missing_cache("conv2d");
        };
        let p = &self.params;
        let x = &cache.input;
        let (ho, wo) = p.output_hw(x.height(), x.width())?;
        if grad_out.dims() != [x.batch(), p.out_channels, ho, wo] {
            return Err(Error::InvalidShape(format!(
                "conv2d upstream gradient {:?}",
                grad_out.dims()
            )));
        }
        let (o, kk, npix) = (p.out_channels, p.fan_in(), ho * wo);
        let mut dx = Tensor4::zeros(x.dims());
        let mut dweight = vec![0.0; o * kk];
        let mut cols = vec![0.0; kk * npix];
        let mut dcols = vec![0.0; kk * npix];
        for b in 0..x.batch() {
            let g = &grad_out.data()[b * o * npix..(b + 1) * o * npix];
            im2col(x, b, p, ho, wo, &mut cols);
            // dW += g * cols^T
            gemm(
                o,
                npix,
                kk,
                g,
                Strides::rows(npix),
                &cols,
                Strides::transposed(npix),
                1.0,
                &mut dweight,
            );
            // dcols = W^T * g
            gemm(
                kk,
                o,
                npix,
                &cache.weight,
                Strides::transposed(kk),
                g,
                Strides::rows(npix),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, &mut dx, b, p, ho, wo);
        }
        if let Some(ws) = &cache.ws {
            dweight = standardize_rows_backward(&dweight, ws);
        }
        for (acc, d) in self.params.weight.grad.iter_mut().zip(&dweight) {
            *acc += d;
        }
        if let Some(bias) = &mut self.params.bias {
            for (c, acc) in bias.grad.iter_mut().enumerate() {
                *acc += (0..x.batch())
                    .map(|b| grad_out.plane(b, c).iter().sum::<f64>())
                    .sum::<f64>();
            }
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.params.weight);
        if let Some(b) = &mut self.params.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let mut rng = rand::rng();
        let x = Tensor4::randn([2, 1, 5, 4], &mut rng);
        let mut p = ConvParams::zeros(1, 1, 1, 1, 0, true).unwrap();
        p.weight.value[0] = 1.0;
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_interior_sums_nine() {
        let x = Tensor4::full([1, 1, 5, 5], 1.0);
        let mut p = ConvParams::zeros(1, 1, 3, 1, 1, false).unwrap();
        p.weight.value.fill(1.0);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.dims(), [1, 1, 5, 5]);
        assert_eq!(y.get(0, 0, 2, 2), 9.0);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = rand::rng();
        let x = Tensor4::randn([2, 3, 4, 4], &mut rng);
        let mut p = ConvParams::zeros(2, 3, 3, 1, 1, true).unwrap();
        p.bias.as_mut().unwrap().value = vec![0.5, -2.0];
        let y = conv2d_forward(&x, &p).unwrap();
        assert!(y.plane(1, 0).iter().all(|&v| v == 0.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn strided_output_dims() {
        let p = ConvParams::zeros(4, 2, 3, 2, 1, false).unwrap();
        assert_eq!(p.output_hw(8, 8).unwrap(), (4, 4));
        let p = ConvParams::zeros(4, 2, 1, 2, 0, false).unwrap();
        assert_eq!(p.output_hw(8, 8).unwrap(), (4, 4));
    }

    #[test]
    fn channel_mismatch() {
        let p = ConvParams::zeros(4, 2, 3, 1, 1, false).unwrap();
        let x = Tensor4::zeros([1, 3, 4, 4]);
        assert!(matches!(
            conv2d_forward(&x, &p),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvParams::zeros(1, 1, 2, 1, 0, false).is_err());
    }

    #[test]
    fn matches_direct_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::randn([2, 3, 6, 5], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let p = ConvParams::kaiming(4, 3, 3, stride, pad, true, &mut rng).unwrap();
            let y = conv2d_forward(&x, &p).unwrap();
            let (ho, wo) = p.output_hw(6, 5).unwrap();
            for b in 0..2 {
                for o in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = p.bias.as_ref().unwrap().value[o];
                            for i in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if (0..6).contains(&iy) && (0..5).contains(&ix) {
                                            acc += p.weight.value[((o * 3 + i) * 3 + ky) * 3 + kx]
                                                * x.get(b, i, iy as usize, ix as usize);
                                        }
                                    }
                                }
                            }
                            assert!((acc - y.get(b, o, oy, ox)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
