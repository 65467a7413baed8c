use normlab_core::diagnostics::{record_stats, statdiff_report, ChannelStatRecord};
use normlab_core::layers::{Conv2d, ConvParams};
use normlab_core::norm::{
    ws_standardize, BatchNorm, ChannelNorm, LargeBcn, NormKind, NormSpec, DEFAULT_EPS, WS_EPS,
};
use normlab_core::tensor::slice_moments;
use normlab_core::{Layer, Mode, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shifted_randn(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let c = dims[1];
    let shift: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
    let scale: Vec<f64> = (0..c).map(|_| rng.random_range(2.0..6.0)).collect();
    let mut x = Tensor4::randn(dims, rng);
    for b in 0..dims[0] {
        for ch in 0..c {
            x.plane_mut(b, ch)
                .iter_mut()
                .for_each(|v| *v = scale[ch] * *v + shift[ch]);
        }
    }
    x
}

fn channel_values(x: &Tensor4, c: usize) -> Vec<f64> {
    (0..x.batch())
        .flat_map(|b| x.plane(b, c).to_vec())
        .collect()
}

#[test]
fn batch_norm_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dims in [[16, 3, 1, 1], [4, 5, 2, 2], [2, 4, 4, 4], [8, 2, 3, 5]] {
        let x = shifted_randn(dims, &mut rng);
        let mut bn = BatchNorm::new(dims[1], DEFAULT_EPS, 0.1);
        bn.forward(&x, Mode::Train).unwrap();
        let n = bn.normalized().unwrap();
        for c in 0..dims[1] {
            let (mean, var) = slice_moments(&channel_values(&n, c));
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-5, "var {var}");
        }
    }
}

#[test]
fn ws_rows_satisfy_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let o = rng.random_range(1..9);
        let i = rng.random_range(1..9);
        let k = [1, 3, 5][rng.random_range(0..3)];
        if i * k * k < 2 {
            continue;
        }
        let mut p = ConvParams::kaiming(o, i, k, 1, k / 2, false, &mut rng).unwrap();
        let offset = rng.random_range(-3.0..3.0);
        p.weight
            .value
            .iter_mut()
            .for_each(|v| *v = 10.0 * *v + offset);
        let ws = ws_standardize(&p).unwrap();
        for row in ws.weight.value.chunks(p.fan_in()) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let ss: f64 = row.iter().map(|v| v * v).sum();
            assert!(mean.abs() <= 1e-7);
            assert!((ss - 1.0).abs() <= 1e-6);
        }
    }
}

/// Normalizes each `(b, g)` slice with a direct double loop.
fn oracle_group_norm(x: &Tensor4, groups: usize, eps: f64) -> Tensor4 {
    let [bs, c, h, w] = x.dims();
    let per = c / groups;
    let mut out = x.clone();
    for b in 0..bs {
        for g in 0..groups {
            let mut sum = 0.0;
            let mut n = 0.0;
            for ch in g * per..(g + 1) * per {
                for i in 0..h {
                    for j in 0..w {
                        sum += x.get(b, ch, i, j);
                        n += 1.0;
                    }
                }
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for ch in g * per..(g + 1) * per {
                for i in 0..h {
                    for j in 0..w {
                        sq += (x.get(b, ch, i, j) - mean).powi(2);
                    }
                }
            }
            let inv = 1.0 / (sq / n + eps).sqrt();
            for ch in g * per..(g + 1) * per {
                for i in 0..h {
                    for j in 0..w {
                        out.set(b, ch, i, j, (x.get(b, ch, i, j) - mean) * inv);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn layer_and_instance_norm_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let x = shifted_randn([3, 6, 4, 5], &mut rng);
        let mut ln = ChannelNorm::layer_norm(6, DEFAULT_EPS).unwrap();
        let y = ln.forward(&x, Mode::Train).unwrap();
        assert!(
            y.max_abs_diff(&oracle_group_norm(&x, 1, DEFAULT_EPS))
                .unwrap()
                <= 1e-12
        );
        let mut inorm = ChannelNorm::instance_norm(6, DEFAULT_EPS).unwrap();
        let y = inorm.forward(&x, Mode::Train).unwrap();
        assert!(
            y.max_abs_diff(&oracle_group_norm(&x, 6, DEFAULT_EPS))
                .unwrap()
                <= 1e-12
        );
    }
}

#[test]
fn large_bcn_is_the_composition_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for groups in [1, 2, 4] {
        let x = shifted_randn([4, 4, 3, 3], &mut rng);
        let mut bn = BatchNorm::new(4, DEFAULT_EPS, 0.1);
        let mut cn = ChannelNorm::per_group(4, groups, DEFAULT_EPS).unwrap();
        for v in bn
            .affine
            .gamma
            .value
            .iter_mut()
            .chain(&mut cn.affine.beta.value)
        {
            *v = rng.random_range(-2.0..2.0);
        }
        let mut bcn = LargeBcn::new(
            {
                let mut b = BatchNorm::new(4, DEFAULT_EPS, 0.1);
                b.affine = bn.affine.clone();
                b
            },
            {
                let mut c = ChannelNorm::per_group(4, groups, DEFAULT_EPS).unwrap();
                c.affine = cn.affine.clone();
                c
            },
        );
        let composed = cn
            .forward(&bn.forward(&x, Mode::Train).unwrap(), Mode::Train)
            .unwrap();
        assert_eq!(bcn.forward(&x, Mode::Train).unwrap(), composed);
    }
}

#[test]
fn large_bcn_on_iid_input_is_close_to_batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor4::randn([4, 32, 32, 32], &mut rng).map(|v| 3.0 * v + 1.0);
    let mut bcn = NormSpec {
        groups: Some(1),
        ..NormSpec::new(NormKind::BcnLarge)
    }
    .build(32, None)
    .unwrap();
    bcn.forward(&x, Mode::Train).unwrap();
    let mut bn = BatchNorm::new(32, DEFAULT_EPS, 0.1);
    bn.forward(&x, Mode::Train).unwrap();
    let diff = bcn
        .normalized()
        .unwrap()
        .sub(normlab_core::tensor::Operand::Tensor(
            &bn.normalized().unwrap(),
        ))
        .unwrap();
    let rms = (diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).sqrt();
    assert!(rms <= 1e-2, "rms {rms}");
}

#[test]
fn ws_conv_propagates_channel_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, s) = (2.5, 1.7);
    let x = Tensor4::randn([100, 16, 10, 10], &mut rng).map(|v| m + s * v);
    let p = ConvParams::kaiming(8, 16, 1, 1, 0, false, &mut rng).unwrap();
    let mut conv = Conv2d::new(p).with_weight_standardization(WS_EPS);
    let y = conv.forward(&x, Mode::Train).unwrap();
    let n = (y.batch() * y.plane_len()) as f64;
    assert!(n >= 1e4);
    for c in 0..y.channels() {
        let (mean, var) = slice_moments(&channel_values(&y, c));
        assert!(mean.abs() <= 3.0 * s / n.sqrt(), "channel {c} mean {mean}");
        assert!(
            (var.sqrt() - s).abs() <= 0.1 * s,
            "channel {c} std {}",
            var.sqrt()
        );
    }
}

#[test]
fn statdiff_after_batch_norm_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bn = NormSpec::new(NormKind::Bn).build(8, None).unwrap();
    let mut rec = ChannelStatRecord::new(0, 8, 0.01);
    for _ in 0..100 {
        let x = shifted_randn([8, 8, 4, 4], &mut rng);
        bn.forward(&x, Mode::Train).unwrap();
        record_stats(&mut rec, &bn.normalized().unwrap()).unwrap();
    }
    let report = statdiff_report(&[rec], &[1], 0).unwrap();
    assert!(report.layer_mean <= 1e-3, "{report:?}");
}

#[test]
fn every_normalizer_maps_constant_to_zero() {
    for kind in [
        NormKind::Bn,
        NormKind::Ln,
        NormKind::Gn,
        NormKind::In,
        NormKind::Fixed,
        NormKind::BcnLarge,
        NormKind::BcnMicro,
    ] {
        let mut n = NormSpec::new(kind).build(8, None).unwrap();
        n.forward(&Tensor4::full([2, 8, 2, 2], 3.0), Mode::Train)
            .unwrap();
        let y = n.normalized().unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6), "{kind}");
    }
}
