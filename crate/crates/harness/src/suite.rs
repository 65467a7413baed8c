//! Finite-difference gradient suite over every differentiable operation.

use normlab_core::layers::{
    gradcheck, gradcheck_scalar, softmax_xent, AvgPool2, Conv2d, ConvParams, GlobalAvgPool,
    GradcheckOptions, GradcheckReport, Linear, Relu,
};
use normlab_core::norm::ws::{standardize_rows, standardize_rows_backward};
use normlab_core::norm::{Affine, AffineParams, NormKind, NormSpec, WS_EPS};
use normlab_core::{Layer, Mode, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::models::sample_fixed_stats;

pub const DEFAULT_SEEDS: u64 = 10;

/// Shapes cycled through by seed; the largest is `(4, 8, 8, 8)`.
const SHAPES: [[usize; 4]; 4] = [[2, 4, 3, 3], [3, 8, 4, 4], [4, 8, 8, 8], [1, 4, 6, 2]];

pub const OPERATIONS: [&str; 16] = [
    "conv",
    "conv+ws",
    "relu",
    "avgpool2",
    "global-avgpool",
    "linear",
    "softmax-xent",
    "affine",
    "ws",
    "bn",
    "ln",
    "gn",
    "in",
    "fixedstat",
    "bcn-large",
    "bcn-micro",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub operation: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst: String,
    pub passed: bool,
}

fn perturb_params(layer: &mut dyn Layer, rng: &mut ChaCha8Rng) {
    layer.visit_params(&mut |p| {
        for v in &mut p.value {
            *v += 0.5 * rng.random_range(-1.0..1.0);
        }
    });
}

fn shape(seed: u64, op: &str) -> [usize; 4] {
    let s = SHAPES[seed as usize % SHAPES.len()];
    match op {
        // Batch statistics need at least two samples.
        "bn" | "fixedstat" | "bcn-large" if s[0] < 2 => [2, s[1], s[2], s[3]],
        "avgpool2" => [s[0], s[1], s[2] & !1, s[3] & !1],
        _ => s,
    }
}

fn check_norm(
    spec: NormSpec,
    x: &Tensor4,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
) -> normlab_core::Result<GradcheckReport> {
    let c = x.channels();
    let fixed =
        (spec.kind == NormKind::Fixed).then(|| sample_fixed_stats(c, 1.0, 0.5, rng.random()));
    let mut n = spec.build(c, fixed)?;
    perturb_params(&mut n, rng);
    if spec.kind == NormKind::BcnMicro {
        // Move the estimates off their initial values first.
        n.forward(x, Mode::Train)?;
    }
    gradcheck(&mut n, x, opts)
}

/// Checks one operation at one seed.
pub fn check_operation(op: &str, seed: u64) -> normlab_core::Result<GradcheckReport> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ op.len() as u64);
    let dims = shape(seed, op);
    let [b, c, h, w] = dims;
    let x = Tensor4::randn(dims, &mut rng).map(|v| 1.5 * v + 0.3);
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    let groups = (c / 2).max(1);
    match op {
        "conv" => {
            let stride = 1 + (seed as usize % 2);
            let mut l = Conv2d::new(ConvParams::kaiming(c, c, 3, stride, 1, true, &mut rng)?);
            gradcheck(&mut l, &x, &opts)
        }
        "conv+ws" => {
            let mut l = Conv2d::new(ConvParams::kaiming(c, c, 3, 1, 1, false, &mut rng)?)
                .with_weight_standardization(WS_EPS);
            gradcheck(&mut l, &x, &opts)
        }
        "relu" => {
            let away = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            gradcheck(&mut Relu::new(), &away, &opts)
        }
        "avgpool2" => gradcheck(&mut AvgPool2::new(), &x, &opts),
        "global-avgpool" => gradcheck(&mut GlobalAvgPool::new(), &x, &opts),
        "linear" => {
            let f = x.reshape([b, c * h * w, 1, 1])?;
            let mut l = Linear::kaiming(c * h * w, 10, &mut rng);
            gradcheck(&mut l, &f, &opts)
        }
        "softmax-xent" => {
            let logits = Tensor4::randn([b, 10, 1, 1], &mut rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..10)).collect();
            gradcheck_scalar(&logits, |z| softmax_xent(z, &labels), &opts)
        }
        "affine" => {
            let mut l = Affine::new(AffineParams::identity(c));
            perturb_params(&mut l, &mut rng);
            gradcheck(&mut l, &x, &opts)
        }
        "ws" => {
            let fan_in = c * 9;
            let raw = Tensor4::randn([1, 1, c, fan_in], &mut rng);
            let r = Tensor4::randn([1, 1, c, fan_in], &mut rng);
            gradcheck_scalar(
                &raw,
                |w| {
                    let (s, cache) = standardize_rows(w.data(), c, WS_EPS)?;
                    let loss = s.iter().zip(r.data()).map(|(a, b)| a * b).sum();
                    Ok((
                        loss,
                        Tensor4::new(w.dims(), standardize_rows_backward(r.data(), &cache))?,
                    ))
                },
                &opts,
            )
        }
        "bn" => check_norm(NormSpec::new(NormKind::Bn), &x, &opts, &mut rng),
        "ln" => check_norm(NormSpec::new(NormKind::Ln), &x, &opts, &mut rng),
        "gn" => check_norm(
            NormSpec {
                groups: Some(groups),
                ..NormSpec::new(NormKind::Gn)
            },
            &x,
            &opts,
            &mut rng,
        ),
        "in" => check_norm(NormSpec::new(NormKind::In), &x, &opts, &mut rng),
        "fixedstat" => check_norm(NormSpec::new(NormKind::Fixed), &x, &opts, &mut rng),
        // Singleton groups would cancel the batch-stage shift exactly.
        "bcn-large" => check_norm(
            NormSpec {
                groups: Some(groups),
                ..NormSpec::new(NormKind::BcnLarge)
            },
            &x,
            &opts,
            &mut rng,
        ),
        "bcn-micro" => {
            let spec = NormSpec {
                groups: Some(groups),
                update_rate: Some(0.3),
                ..NormSpec::new(NormKind::BcnMicro)
            };
            check_norm(
                spec,
                &x,
                &GradcheckOptions {
                    analytic_mode: Mode::Train,
                    probe_mode: Mode::Eval,
                    ..opts
                },
                &mut rng,
            )
        }
        other => Err(normlab_core::Error::InvalidInput(format!(
            "unknown operation {other}"
        ))),
    }
}

/// Runs every operation over `seeds` seeds and keeps the worst error of
/// each. An error raised by an operation counts as a failure.
pub fn run_gradient_suite(seeds: u64) -> Vec<SuiteEntry> {
    OPERATIONS
        .iter()
        .map(|&op| {
            let mut entry = SuiteEntry {
                operation: op.to_string(),
                seeds,
                max_rel_error: 0.0,
                worst: String::new(),
                passed: true,
            };
            for seed in 0..seeds {
                match check_operation(op, seed) {
                    Ok(r) => {
                        if r.max_rel_error() >= entry.max_rel_error {
                            entry.max_rel_error = r.max_rel_error();
                            entry.worst = format!("seed {seed} {}", r.worst);
                        }
                        entry.passed &= r.passed();
                    }
                    Err(e) => {
                        entry.passed = false;
                        entry.max_rel_error = f64::INFINITY;
                        entry.worst = format!("seed {seed}: {e}");
                    }
                }
            }
            entry
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes_one_seed() {
        for e in run_gradient_suite(1) {
            assert!(e.passed, "{e:?}");
        }
    }

    #[test]
    fn unknown_operation_is_an_error() {
        assert!(check_operation("dropout", 0).is_err());
    }
}
