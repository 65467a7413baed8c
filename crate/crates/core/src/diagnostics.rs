//! Distance-to-singularity diagnostics: running channel statistics, the
//! per-group statistical difference (StatDiff), and a probe for channels
//! that are never activated.

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::layers::{Layer, Mode};
use crate::norm::Normalizer;
use crate::tensor::{slice_moments, Tensor4};

/// Default EMA momentum of [`ChannelStatRecord`].
pub const DEFAULT_RECORD_MOMENTUM: f64 = 0.01;

/// Running per-channel mean and variance of one tapped layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelStatRecord {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub count: u64,
}

impl ChannelStatRecord {
    pub fn new(layer: usize, channels: usize, momentum: f64) -> Self {
        Self {
            layer,
            mean: vec![0.0; channels],
            var: vec![0.0; channels],
            momentum,
            count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Running standard deviations.
    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Folds one batch into the record. Until `1 / momentum` batches have been
/// seen the step is `1 / count`, i.e. a plain cumulative average, which
/// removes the bias toward the zero initialization.
pub fn record_stats(rec: &mut ChannelStatRecord, conv_out: &Tensor4) -> Result<()> {
    if conv_out.channels() != rec.channels() {
        return shape_err(format!(
            "record over {} channels given {}",
            rec.channels(),
            conv_out.channels()
        ));
    }
    let (mean, var) = conv_out.channel_moments()?;
    rec.count += 1;
    let step = rec.momentum.max(1.0 / rec.count as f64);
    for c in 0..rec.channels() {
        rec.mean[c] += step * (mean[c] - rec.mean[c]);
        rec.var[c] += step * (var[c] - rec.var[c]);
    }
    Ok(())
}

/// Standard deviation of the channel means divided by the mean of the
/// channel standard deviations, over one group.
pub fn statdiff(group_means: &[f64], group_stds: &[f64]) -> Result<f64> {
    if group_means.is_empty() || group_means.len() != group_stds.len() {
        return shape_err(format!(
            "statdiff over {} means and {} stds",
            group_means.len(),
            group_stds.len()
        ));
    }
    if group_stds.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidInput("negative or non-finite std".into()));
    }
    let (_, mean_var) = slice_moments(group_means);
    let std_mean = group_stds.iter().sum::<f64>() / group_stds.len() as f64;
    if std_mean <= 0.0 {
        return Err(Error::DegenerateGroup("mean of stds is zero".into()));
    }
    Ok(mean_var.sqrt() / std_mean)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStatDiff {
    pub layer: usize,
    pub groups: Vec<f64>,
    pub mean: f64,
}

/// StatDiff of every group of every tapped layer at one point in training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatDiffReport {
    pub epoch: usize,
    pub layers: Vec<LayerStatDiff>,
    /// Mean over all groups of all layers.
    pub group_mean: f64,
    /// Standard deviation over all groups of all layers.
    pub group_std: f64,
    /// Mean of the per-layer means.
    pub layer_mean: f64,
}

pub fn statdiff_report(
    records: &[ChannelStatRecord],
    groups: &[usize],
    epoch: usize,
) -> Result<StatDiffReport> {
    if records.len() != groups.len() {
        return shape_err(format!(
            "{} records but {} groupings",
            records.len(),
            groups.len()
        ));
    }
    let mut layers = Vec::with_capacity(records.len());
    let mut all = Vec::new();
    for (rec, &g) in records.iter().zip(groups) {
        let c = rec.channels();
        if g == 0 || c % g != 0 {
            return Err(Error::InvalidGrouping {
                channels: c,
                groups: g,
            });
        }
        let per = c / g;
        let stds = rec.std();
        let values = (0..g)
            .map(|gi| {
                let r = gi * per..(gi + 1) * per;
                statdiff(&rec.mean[r.clone()], &stds[r]).map_err(|e| match e {
                    Error::DegenerateGroup(m) => {
                        Error::DegenerateGroup(format!("layer {} group {gi}: {m}", rec.layer))
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = values.iter().sum::<f64>() / g as f64;
        all.extend_from_slice(&values);
        layers.push(LayerStatDiff {
            layer: rec.layer,
            groups: values,
            mean,
        });
    }
    let (group_mean, group_var) = if all.is_empty() {
        (0.0, 0.0)
    } else {
        slice_moments(&all)
    };
    let layer_mean = if layers.is_empty() {
        0.0
    } else {
        layers.iter().map(|l| l.mean).sum::<f64>() / layers.len() as f64
    };
    Ok(StatDiffReport {
        epoch,
        layers,
        group_mean,
        group_std: group_var.sqrt(),
        layer_mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerElimination {
    pub layer: usize,
    /// Largest post-affine, pre-ReLU value seen per channel.
    pub max_activation: Vec<f64>,
    pub deactivated: Vec<bool>,
    pub deactivated_fraction: f64,
    /// Fraction of channels whose maximum stays below `tau`.
    pub near_deactivated_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EliminationReport {
    pub tau: f64,
    pub layers: Vec<LayerElimination>,
}

impl EliminationReport {
    pub fn deactivated_fraction(&self) -> f64 {
        let (dead, total) = self.layers.iter().fold((0usize, 0usize), |(d, t), l| {
            (
                d + l.deactivated.iter().filter(|&&x| x).count(),
                t + l.deactivated.len(),
            )
        });
        if total == 0 {
            0.0
        } else {
            dead as f64 / total as f64
        }
    }

    /// Recomputes the near-deactivation fractions for another threshold.
    pub fn with_tau(&self, tau: f64) -> Self {
        let mut out = self.clone();
        out.tau = tau;
        for l in &mut out.layers {
            l.near_deactivated_fraction = fraction_below(&l.max_activation, tau);
        }
        out
    }
}

fn fraction_below(values: &[f64], tau: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v < tau).count() as f64 / values.len() as f64
}

/// Runs `model` in eval mode over `batches` and tracks, for every
/// normalizer, the per-channel maximum of its output. A channel whose
/// maximum is below zero is never let through the following ReLU.
pub fn elimination_probe<L, I>(model: &mut L, batches: I, tau: f64) -> Result<EliminationReport>
where
    L: Layer + ?Sized,
    I: IntoIterator<Item = Tensor4>,
{
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::InvalidInput(format!("tau must be >= 0, got {tau}")));
    }
    model.visit_normalizers_mut(&mut |n: &mut Normalizer| n.set_tapping(true));
    let result = probe_batches(model, batches);
    model.visit_normalizers_mut(&mut |n: &mut Normalizer| n.set_tapping(false));
    let maxima = result?;
    let layers = maxima
        .into_iter()
        .enumerate()
        .map(|(layer, max_activation)| {
            let deactivated: Vec<bool> = max_activation.iter().map(|&m| m < 0.0).collect();
            LayerElimination {
                layer,
                deactivated_fraction: fraction_below(&max_activation, 0.0),
                near_deactivated_fraction: fraction_below(&max_activation, tau),
                max_activation,
                deactivated,
            }
        })
        .collect();
    Ok(EliminationReport { tau, layers })
}

fn probe_batches<L, I>(model: &mut L, batches: I) -> Result<Vec<Vec<f64>>>
where
    L: Layer + ?Sized,
    I: IntoIterator<Item = Tensor4>,
{
    let mut maxima: Vec<Vec<f64>> = Vec::new();
    let mut seen = 0usize;
    for batch in batches {
        model.forward(&batch, Mode::Eval)?;
        seen += 1;
        let mut i = 0;
        model.visit_normalizers(&mut |n: &Normalizer| {
            if let Some(out) = n.last_output() {
                if maxima.len() <= i {
                    maxima.push(vec![f64::NEG_INFINITY; out.channels()]);
                }
                for b in 0..out.batch() {
                    for (c, m) in maxima[i].iter_mut().enumerate() {
                        let local = out
                            .plane(b, c)
                            .iter()
                            .copied()
                            .fold(f64::NEG_INFINITY, f64::max);
                        *m = m.max(local);
                    }
                }
            }
            i += 1;
        });
    }
    if seen == 0 {
        return Err(Error::InvalidInput(
            "elimination probe needs at least one batch".into(),
        ));
    }
    Ok(maxima)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2d, ConvParams, Graph, Relu};
    use crate::norm::{NormKind, NormLayer, NormSpec};
    use proptest::prelude::*;

    #[test]
    fn statdiff_hand_values() {
        assert_eq!(statdiff(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(statdiff(&[3.0, 3.0, 3.0], &[0.5, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(statdiff(&[-4.0], &[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn statdiff_errors() {
        assert!(matches!(
            statdiff(&[0.0, 1.0], &[0.0, 0.0]),
            Err(Error::DegenerateGroup(_))
        ));
        assert!(statdiff(&[], &[]).is_err());
        assert!(statdiff(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn record_first_update_is_batch_stats() {
        let x = Tensor4::new([2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut r = ChannelStatRecord::new(0, 1, 1.0);
        record_stats(&mut r, &x).unwrap();
        assert_eq!(r.mean, vec![2.0]);
        assert_eq!(r.var, vec![1.0]);
        // Bias correction makes the first update exact for any momentum.
        let mut r = ChannelStatRecord::new(0, 1, 0.01);
        record_stats(&mut r, &x).unwrap();
        assert_eq!(r.mean, vec![2.0]);
    }

    #[test]
    fn record_two_step_ema() {
        let mut r = ChannelStatRecord::new(0, 1, 0.5);
        record_stats(&mut r, &Tensor4::new([2, 1, 1, 1], vec![1.0, 3.0]).unwrap()).unwrap();
        record_stats(&mut r, &Tensor4::new([2, 1, 1, 1], vec![2.0, 6.0]).unwrap()).unwrap();
        // step 1: mean 2, var 1; step 2 (m = 0.5): mean 3, var 2.5
        assert_eq!(r.mean, vec![3.0]);
        assert_eq!(r.var, vec![2.5]);
        assert_eq!(r.count, 2);
    }

    #[test]
    fn record_constant_stream() {
        let mut r = ChannelStatRecord::new(0, 2, 0.1);
        for _ in 0..50 {
            record_stats(&mut r, &Tensor4::full([3, 2, 2, 2], 4.0)).unwrap();
        }
        assert_eq!(r.mean, vec![4.0, 4.0]);
        assert_eq!(r.std(), vec![0.0, 0.0]);
    }

    #[test]
    fn report_aggregates() {
        let rec = ChannelStatRecord {
            layer: 0,
            mean: vec![0.0, 2.0, 5.0, 7.0],
            var: vec![1.0; 4],
            momentum: 0.1,
            count: 1,
        };
        let r = statdiff_report(std::slice::from_ref(&rec), &[2], 3).unwrap();
        assert_eq!(r.layers[0].groups, vec![1.0, 1.0]);
        assert_eq!(r.layers[0].mean, 1.0);
        assert_eq!(r.epoch, 3);
        let inst = statdiff_report(&[rec], &[4], 0).unwrap();
        assert!(inst.layers[0].groups.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn report_identifies_degenerate_group() {
        let rec = ChannelStatRecord {
            layer: 7,
            mean: vec![0.0, 1.0, 2.0, 3.0],
            var: vec![1.0, 1.0, 0.0, 0.0],
            momentum: 0.1,
            count: 1,
        };
        let err = statdiff_report(&[rec], &[2], 0).unwrap_err();
        assert!(err.to_string().contains("layer 7 group 1"), "{err}");
    }

    #[test]
    fn identical_channels_report_zero() {
        let rec = ChannelStatRecord {
            layer: 0,
            mean: vec![0.3; 8],
            var: vec![2.0; 8],
            momentum: 0.1,
            count: 1,
        };
        let r = statdiff_report(&[rec.clone(), rec], &[1, 4], 0).unwrap();
        assert_eq!(r.group_mean, 0.0);
        assert_eq!(r.layer_mean, 0.0);
    }

    fn conv_bn_relu(channels: usize) -> Graph {
        let mut p = ConvParams::zeros(channels, 1, 1, 1, 0, false).unwrap();
        p.weight.value = (0..channels).map(|c| 1.0 + c as f64).collect();
        let mut g = Graph::new();
        g.push(Conv2d::new(p));
        g.push(NormSpec::new(NormKind::Bn).build(channels, None).unwrap());
        g.push(Relu::new());
        g
    }

    fn set_affine(g: &mut Graph, channel: usize, gamma: f64, beta: f64) {
        g.visit_normalizers_mut(&mut |n| {
            if let NormLayer::Batch(bn) = n.layer_mut() {
                bn.affine.gamma.value[channel] = gamma;
                bn.affine.beta.value[channel] = beta;
            }
        });
    }

    fn batches(n: usize) -> Vec<Tensor4> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        (0..n)
            .map(|_| Tensor4::randn([4, 1, 4, 4], &mut rng))
            .collect()
    }

    #[test]
    fn probe_flags_suppressed_channel() {
        let mut g = conv_bn_relu(3);
        // Populate running statistics.
        for b in batches(20) {
            g.forward(&b, Mode::Train).unwrap();
        }
        set_affine(&mut g, 1, 0.01, -10.0);
        let report = elimination_probe(&mut g, batches(5), 0.0).unwrap();
        let l = &report.layers[0];
        assert_eq!(l.deactivated, vec![false, true, false]);
        assert!((l.deactivated_fraction - 1.0 / 3.0).abs() < 1e-15);
        // Tapping is switched back off.
        g.visit_normalizers(&mut |n| assert!(n.last_output().is_none()));
    }

    #[test]
    fn probe_all_dead_and_empty() {
        let mut g = conv_bn_relu(2);
        for c in 0..2 {
            set_affine(&mut g, c, 0.0, -1.0);
        }
        let report = elimination_probe(&mut g, batches(2), 0.0).unwrap();
        assert_eq!(report.layers[0].deactivated_fraction, 1.0);
        assert_eq!(report.deactivated_fraction(), 1.0);
        assert!(matches!(
            elimination_probe(&mut g, Vec::new(), 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    proptest! {
        #[test]
        fn statdiff_scale_invariant(
            means in proptest::collection::vec(-5.0f64..5.0, 1..8),
            stds_seed in proptest::collection::vec(0.1f64..3.0, 8),
            lambda in 1e-3f64..1e3,
            shift in -100.0f64..100.0,
        ) {
            let stds = &stds_seed[..means.len()];
            let base = statdiff(&means, stds).unwrap();
            let scaled_m: Vec<f64> = means.iter().map(|m| m * lambda).collect();
            let scaled_s: Vec<f64> = stds.iter().map(|s| s * lambda).collect();
            let scaled = statdiff(&scaled_m, &scaled_s).unwrap();
            prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1e-300) + 1e-15);
            let shifted_m: Vec<f64> = means.iter().map(|m| m + shift).collect();
            let shifted = statdiff(&shifted_m, stds).unwrap();
            prop_assert!((shifted - base).abs() <= 1e-9 * (1.0 + base));
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn near_deactivation_monotone(maxes in proptest::collection::vec(-3.0f64..3.0, 1..20), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let rep = EliminationReport {
                tau: 0.0,
                layers: vec![LayerElimination {
                    layer: 0,
                    deactivated: maxes.iter().map(|&m| m < 0.0).collect(),
                    deactivated_fraction: fraction_below(&maxes, 0.0),
                    near_deactivated_fraction: 0.0,
                    max_activation: maxes,
                }],
            };
            let a = rep.with_tau(lo).layers[0].near_deactivated_fraction;
            let b = rep.with_tau(hi).layers[0].near_deactivated_fraction;
            prop_assert!(a <= b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
