use crate::error::{shape_err, Result};
use crate::layers::{missing_cache, Layer, Mode, Param};
use crate::tensor::Tensor4;

/// Learned scale and shift. Entry `i` applies to a run of `per` consecutive
/// channels: `per = 1` is the usual per-channel form, `per = C / G` the
/// per-group form of the channel stage in batch-channel normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub gamma: Param,
    pub beta: Param,
}

impl AffineParams {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(len: usize) -> Self {
        Self {
            gamma: Param::filled(len, 1.0),
            beta: Param::filled(len, 0.0),
        }
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return shape_err(format!(
                "gamma has {} entries, beta {}",
                gamma.len(),
                beta.len()
            ));
        }
        Ok(Self {
            gamma: Param::new(gamma),
            beta: Param::new(beta),
        })
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub(crate) fn channels_per_entry(&self, channels: usize) -> Result<usize> {
        let n = self.len();
        if n == 0 || !channels.is_multiple_of(n) {
            return shape_err(format!("{n} affine entries for {channels} channels"));
        }
        Ok(channels / n)
    }

    /// `z = gamma * y + beta`.
    pub(crate) fn apply(&self, y: &Tensor4) -> Result<Tensor4> {
        let per = self.channels_per_entry(y.channels())?;
        let mut z = y.clone();
        for b in 0..y.batch() {
            for c in 0..y.channels() {
                let (g, s) = (self.gamma.value[c / per], self.beta.value[c / per]);
                z.plane_mut(b, c).iter_mut().for_each(|v| *v = g * *v + s);
            }
        }
        Ok(z)
    }

    /// Accumulates `dgamma`, `dbeta` and returns the gradient wrt `y`.
    pub(crate) fn backward(&mut self, dz: &Tensor4, y: &Tensor4) -> Result<Tensor4> {
        y.check_same_dims(dz)?;
        let per = self.channels_per_entry(y.channels())?;
        let mut dy = dz.clone();
        for b in 0..y.batch() {
            for c in 0..y.channels() {
                let e = c / per;
                let (gp, yp) = (dz.plane(b, c), y.plane(b, c));
                self.beta.grad[e] += gp.iter().sum::<f64>();
                self.gamma.grad[e] += gp.iter().zip(yp).map(|(g, v)| g * v).sum::<f64>();
                let gamma = self.gamma.value[e];
                dy.plane_mut(b, c).iter_mut().for_each(|v| *v *= gamma);
            }
        }
        Ok(dy)
    }

    pub(crate) fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// `z[., c, ., .] = gamma_c * y[., c, ., .] + beta_c`.
pub fn affine_forward(y: &Tensor4, a: &AffineParams) -> Result<Tensor4> {
    if a.len() != y.channels() {
        return shape_err(format!(
            "{} affine entries for {} channels",
            a.len(),
            y.channels()
        ));
    }
    a.apply(y)
}

/// A standalone per-channel affine layer.
pub struct Affine {
    pub params: AffineParams,
    input: Option<Tensor4>,
}

impl Affine {
    pub fn new(params: AffineParams) -> Self {
        Self {
            params,
            input: None,
        }
    }
}

impl Layer for Affine {
    fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let z = affine_forward(x, &self.params)?;
        self.input = Some(x.clone());
        Ok(z)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(x) = &self.input else {
            return missing_cache("affine");
        };
        self.params.backward(grad_out, x)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.params.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_affine() {
        let mut rng = rand::rng();
        let y = Tensor4::randn([2, 3, 2, 2], &mut rng);
        assert_eq!(affine_forward(&y, &AffineParams::identity(3)).unwrap(), y);
    }

    #[test]
    fn scale_and_shift() {
        let y = Tensor4::full([1, 1, 1, 1], 1.0);
        let a = AffineParams::new(vec![2.0], vec![3.0]).unwrap();
        assert_eq!(affine_forward(&y, &a).unwrap().data(), &[5.0]);
    }

    #[test]
    fn length_mismatch() {
        let y = Tensor4::zeros([1, 4, 1, 1]);
        assert!(affine_forward(&y, &AffineParams::identity(2)).is_err());
    }

    #[test]
    fn beta_gradient_matches_finite_difference() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let y = Tensor4::randn([3, 2, 2, 2], &mut rng);
        let up = Tensor4::randn([3, 2, 2, 2], &mut rng);
        let mut layer = Affine::new(AffineParams::new(vec![0.5, -1.5], vec![0.1, 0.2]).unwrap());
        layer.forward(&y, Mode::Train).unwrap();
        layer.backward(&up).unwrap();
        let h = 1e-5;
        for c in 0..2 {
            let loss = |beta: f64| {
                let mut p = layer.params.clone();
                p.beta.value[c] = beta;
                affine_forward(&y, &p).unwrap().dot(&up).unwrap()
            };
            let b0 = layer.params.beta.value[c];
            let numeric = (loss(b0 + h) - loss(b0 - h)) / (2.0 * h);
            let summed: f64 = (0..3).map(|b| up.plane(b, c).iter().sum::<f64>()).sum();
            assert!((layer.params.beta.grad[c] - numeric).abs() < 1e-8);
            assert!((layer.params.beta.grad[c] - summed).abs() < 1e-12);
        }
    }
}
