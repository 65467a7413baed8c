use normlab_core::layers::ConvParams;
use normlab_core::norm::{
    estimator_update, ws_standardize, BatchNorm, ChannelNorm, EstimatorState, NormKind, NormSpec,
    DEFAULT_EPS,
};
use normlab_core::tensor::slice_moments;
use normlab_core::{Layer, Mode, Tensor4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(dims: [usize; 4], seed: u64, scale: f64, shift: f64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::randn(dims, &mut rng).map(|v| scale * v + shift)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bn_pre_affine_is_standardized(
        b in 2usize..6, c in 1usize..5, h in 2usize..5, w in 2usize..5,
        seed in any::<u64>(), scale in 2.0f64..20.0, shift in -50.0f64..50.0,
    ) {
        let x = input([b, c, h, w], seed, scale, shift);
        let mut bn = BatchNorm::new(c, DEFAULT_EPS, 0.1);
        bn.forward(&x, Mode::Train).unwrap();
        let n = bn.normalized().unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|i| n.plane(i, ch).to_vec()).collect();
            let (mean, var) = slice_moments(&vals);
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn ws_rows_have_zero_mean_unit_norm(
        o in 1usize..6, i in 2usize..6, seed in any::<u64>(), offset in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ConvParams::kaiming(o, i, 3, 1, 1, false, &mut rng).unwrap();
        p.weight.value.iter_mut().for_each(|v| *v += offset);
        let ws = ws_standardize(&p).unwrap();
        for row in ws.weight.value.chunks(p.fan_in()) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            prop_assert!(mean.abs() <= 1e-7);
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn channel_norm_is_per_sample(
        c_per in 1usize..4, groups in 1usize..4, seed in any::<u64>(), scale in 0.5f64..5.0,
    ) {
        let c = c_per * groups;
        let x = input([3, c, 3, 3], seed, scale, 1.0);
        let mut cn = ChannelNorm::new(c, groups, DEFAULT_EPS).unwrap();
        let whole = cn.forward(&x, Mode::Train).unwrap();
        for b in 0..3 {
            let alone = Tensor4::new([1, c, 3, 3], sample(&x, b).to_vec()).unwrap();
            let y = cn.forward(&alone, Mode::Train).unwrap();
            prop_assert_eq!(y.data(), sample(&whole, b));
        }
    }

    #[test]
    fn normalizers_ignore_a_shift_and_scale(
        kind in prop_oneof![Just(NormKind::Bn), Just(NormKind::Ln), Just(NormKind::Gn), Just(NormKind::In)],
        seed in any::<u64>(), a in 2.0f64..10.0, s in -20.0f64..20.0,
    ) {
        let x = input([4, 4, 3, 3], seed, 3.0, 0.0);
        let spec = NormSpec { groups: Some(2), eps: 1e-30, ..NormSpec::new(kind) };
        let mut n = spec.build(4, None).unwrap();
        let y = n.forward(&x, Mode::Train).unwrap();
        let z = n.forward(&x.map(|v| a * v + s), Mode::Train).unwrap();
        prop_assert!(y.max_abs_diff(&z).unwrap() <= 1e-9);
    }

    #[test]
    fn estimator_mean_contracts_by_one_minus_rate(
        rate in 0.01f64..1.0, seed in any::<u64>(), steps in 1usize..30,
    ) {
        let x = input([2, 3, 2, 2], seed, 2.0, 3.0);
        let (target, _) = x.channel_moments().unwrap();
        let mut e = EstimatorState::new(3, rate, DEFAULT_EPS);
        for _ in 0..steps {
            let before: Vec<f64> = e.mu_hat.iter().zip(&target).map(|(m, t)| m - t).collect();
            estimator_update(&x, &mut e).unwrap();
            for c in 0..3 {
                prop_assert!((e.mu_hat[c] - target[c] - (1.0 - rate) * before[c]).abs() <= 1e-10);
            }
            prop_assert!(e.sigma2_hat.iter().all(|&v| v >= DEFAULT_EPS));
        }
    }
}

fn sample(x: &Tensor4, b: usize) -> &[f64] {
    let n = x.len() / x.batch();
    &x.data()[b * n..(b + 1) * n]
}
