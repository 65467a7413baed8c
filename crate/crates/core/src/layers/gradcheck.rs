use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, Param};
use crate::error::Result;
use crate::tensor::Tensor4;

pub const DEFAULT_GRADCHECK_STEP: f64 = 1e-5;
pub const DEFAULT_GRADCHECK_TOLERANCE: f64 = 1e-4;
const DENOM_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Seeds the random projection that turns the layer output into a scalar.
    pub seed: u64,
    /// Mode of the forward pass whose backward is checked.
    pub analytic_mode: Mode,
    /// Mode of the perturbed forward passes. Using `Eval` after a `Train`
    /// analytic pass freezes any statistics the training pass updated.
    pub probe_mode: Mode,
    pub check_params: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_GRADCHECK_STEP,
            tolerance: DEFAULT_GRADCHECK_TOLERANCE,
            seed: 0,
            analytic_mode: Mode::Train,
            probe_mode: Mode::Train,
            check_params: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub input_max_rel_error: f64,
    pub param_max_rel_error: f64,
    /// Location of the largest relative error, e.g. `input[17]` or `param1[3]`.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.input_max_rel_error.max(self.param_max_rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_GUARD)
}

struct Tracker {
    input: f64,
    param: f64,
    worst: String,
    worst_err: f64,
    checked: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            input: 0.0,
            param: 0.0,
            worst: String::new(),
            worst_err: -1.0,
            checked: 0,
        }
    }

    fn record(&mut self, is_param: bool, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if is_param {
            self.param = self.param.max(err);
        } else {
            self.input = self.input.max(err);
        }
        if err > self.worst_err {
            self.worst_err = err;
            self.worst = at();
        }
    }

    fn finish(self, tolerance: f64) -> GradcheckReport {
        GradcheckReport {
            input_max_rel_error: self.input,
            param_max_rel_error: self.param,
            worst: self.worst,
            checked: self.checked,
            tolerance,
        }
    }
}

fn with_param<L: Layer + ?Sized, T>(
    layer: &mut L,
    index: usize,
    f: impl FnOnce(&mut Param) -> T,
) -> Option<T> {
    let mut f = Some(f);
    let mut out = None;
    let mut i = 0;
    layer.visit_params(&mut |p| {
        if i == index {
            if let Some(f) = f.take() {
                out = Some(f(p));
            }
        }
        i += 1;
    });
    out
}

/// Compares a layer's analytic input and parameter gradients with central
/// finite differences of `L = sum(R * layer(x))` for a fixed random `R`.
pub fn gradcheck<L: Layer + ?Sized>(
    layer: &mut L,
    input: &Tensor4,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = layer.forward(input, opts.analytic_mode)?;
    let projection = Tensor4::randn(y.dims(), &mut rng);
    layer.zero_grad();
    let dx = layer.backward(&projection)?;

    let mut analytic_params = Vec::new();
    layer.visit_params(&mut |p| analytic_params.push(p.grad.clone()));

    let h = opts.step;
    let mut track = Tracker::new();
    let probe = |layer: &mut L, x: &Tensor4| -> Result<f64> {
        layer.forward(x, opts.probe_mode)?.dot(&projection)
    };

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = probe(layer, &x)?;
        x.data_mut()[i] = orig - h;
        let minus = probe(layer, &x)?;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        track.record(false, relative_error(dx.data()[i], numeric), || {
            format!("input[{i}]")
        });
    }

    if opts.check_params {
        for (pi, grads) in analytic_params.iter().enumerate() {
            for (i, &analytic) in grads.iter().enumerate() {
                let orig = with_param(layer, pi, |p| p.value[i]).unwrap_or_default();
                with_param(layer, pi, |p| p.value[i] = orig + h);
                let plus = probe(layer, input)?;
                with_param(layer, pi, |p| p.value[i] = orig - h);
                let minus = probe(layer, input)?;
                with_param(layer, pi, |p| p.value[i] = orig);
                let numeric = (plus - minus) / (2.0 * h);
                track.record(true, relative_error(analytic, numeric), || {
                    format!("param{pi}[{i}]")
                });
            }
        }
    }
    Ok(track.finish(opts.tolerance))
}

/// Finite-difference check of a scalar function that reports its own
/// analytic gradient.
pub fn gradcheck_scalar(
    x: &Tensor4,
    mut f: impl FnMut(&Tensor4) -> Result<(f64, Tensor4)>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let (_, analytic) = f(x)?;
    let h = opts.step;
    let mut track = Tracker::new();
    let mut x = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = f(&x)?.0;
        x.data_mut()[i] = orig - h;
        let minus = f(&x)?.0;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        track.record(false, relative_error(analytic.data()[i], numeric), || {
            format!("input[{i}]")
        });
    }
    Ok(track.finish(opts.tolerance))
}
