//! Dense rank-4 tensors in row-major `(B, C, H, W)` layout.
//!
//! Matrices such as logits or fully-connected activations are stored as
//! `(B, F, 1, 1)` tensors so every layer speaks the same type.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

/// Smallest divisor magnitude accepted by [`Tensor4::elementwise`].
pub const DIVISOR_GUARD: f64 = f64::EPSILON;

/// Mean and population variance of a contiguous slice, with the same
/// pivoted two-pass accumulation as [`Tensor4::reduce_stats`].
pub fn slice_moments(values: &[f64]) -> (f64, f64) {
    let Some(&pivot) = values.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = values.len() as f64;
    let shifted = values.iter().map(|v| v - pivot).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| {
            let d = v - pivot - shifted;
            d * d
        })
        .sum::<f64>()
        / n;
    (pivot + shifted, var)
}

/// A set of tensor axes, used to select reduction dimensions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Axes(u8);

impl Axes {
    pub const NONE: Axes = Axes(0);
    pub const BATCH: Axes = Axes(1);
    pub const CHANNEL: Axes = Axes(1 << 1);
    pub const HEIGHT: Axes = Axes(1 << 2);
    pub const WIDTH: Axes = Axes(1 << 3);
    /// `{H, W}`.
    pub const SPATIAL: Axes = Axes(Self::HEIGHT.0 | Self::WIDTH.0);
    /// `{B, H, W}`: per-channel statistics as used by batch normalization.
    pub const PER_CHANNEL: Axes = Axes(Self::BATCH.0 | Self::SPATIAL.0);
    pub const ALL: Axes = Axes(0b1111);

    pub const fn union(self, other: Axes) -> Axes {
        Axes(self.0 | other.0)
    }

    pub const fn contains_axis(self, axis: usize) -> bool {
        self.0 & (1 << axis) != 0
    }
}

impl std::ops::BitOr for Axes {
    type Output = Axes;

    fn bitor(self, rhs: Axes) -> Axes {
        self.union(rhs)
    }
}

/// Mean and population variance of a reduction, both stored with the
/// reduced axes kept at extent 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Tensor4,
    pub var: Tensor4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor4),
    Scalar(f64),
    /// One value per channel, broadcast over `B`, `H` and `W`.
    PerChannel(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return shape_err(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 4], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [b, c, h, w] = dims;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(bi, ci, hi, wi));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Standard normal entries.
    pub fn randn<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { dims, data }
    }

    /// A `(B, F, 1, 1)` tensor from row-major matrix data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([rows, cols, 1, 1], data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// `H * W`.
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(b, c, h, w);
        self.data[i] = value;
    }

    /// The `H x W` plane of sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.plane_len();
        let start = (b * self.dims[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        let start = (b * self.dims[1] + c) * n;
        &mut self.data[start..start + n]
    }

    /// Returns the same data under new dims with equal element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of elementwise products with a tensor of identical shape.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn check_same_dims(&self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return shape_err(format!("empty tensor {:?}", self.dims));
        }
        Ok(())
    }

    /// Mean and population variance over `axes`.
    ///
    /// Accumulation runs in row-major element order, so identical inputs
    /// give bit-identical results.
    pub fn reduce_stats(&self, axes: Axes) -> Result<Moments> {
        self.check_nonempty()?;
        let mut out_dims = self.dims;
        let mut count = 1usize;
        for (axis, d) in out_dims.iter_mut().enumerate() {
            if axes.contains_axis(axis) {
                count *= *d;
                *d = 1;
            }
        }
        let out_len: usize = out_dims.iter().product();
        // Each slot is shifted by its first element, which makes constant
        // slices come out with exactly their value as mean and 0 variance.
        let mut pivot = vec![f64::NAN; out_len];
        let mut sum = vec![0.0; out_len];
        self.for_each_reduced(out_dims, |i, slot| {
            if pivot[slot].is_nan() {
                pivot[slot] = self.data[i];
            }
            sum[slot] += self.data[i] - pivot[slot];
        });
        let n = count as f64;
        let shifted_mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();

        let mut sq = vec![0.0; out_len];
        self.for_each_reduced(out_dims, |i, slot| {
            let d = self.data[i] - pivot[slot] - shifted_mean[slot];
            sq[slot] += d * d;
        });
        let mean = pivot
            .iter()
            .zip(&shifted_mean)
            .map(|(p, m)| p + m)
            .collect();
        let var = sq.into_iter().map(|s| s / n).collect();
        Ok(Moments {
            mean: Tensor4 {
                dims: out_dims,
                data: mean,
            },
            var: Tensor4 {
                dims: out_dims,
                data: var,
            },
        })
    }

    /// Per-channel mean and population variance over `{B, H, W}`.
    pub fn channel_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.reduce_stats(Axes::PER_CHANNEL)?;
        Ok((m.mean.data, m.var.data))
    }

    fn for_each_reduced(&self, out_dims: [usize; 4], mut f: impl FnMut(usize, usize)) {
        let [b, c, h, w] = self.dims;
        let mut i = 0;
        for bi in 0..b {
            let ob = if out_dims[0] == 1 { 0 } else { bi };
            for ci in 0..c {
                let oc = if out_dims[1] == 1 { 0 } else { ci };
                for hi in 0..h {
                    let oh = if out_dims[2] == 1 { 0 } else { hi };
                    let row = ((ob * out_dims[1] + oc) * out_dims[2] + oh) * out_dims[3];
                    for wi in 0..w {
                        let ow = if out_dims[3] == 1 { 0 } else { wi };
                        f(i, row + ow);
                        i += 1;
                    }
                }
            }
        }
    }

    /// Views the channels as `G` contiguous groups.
    pub fn group_reshape(self, groups: usize) -> Result<GroupView> {
        GroupView::new(self, groups)
    }

    pub fn elementwise(&self, rhs: Operand<'_>, op: BinaryOp) -> Result<Tensor4> {
        let apply = |a: f64, b: f64| -> Result<f64> {
            Ok(match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b.abs() < DIVISOR_GUARD {
                        return Err(Error::DegenerateDivisor(b));
                    }
                    a / b
                }
            })
        };
        let data = match rhs {
            Operand::Tensor(t) => {
                self.check_same_dims(t)?;
                self.data
                    .iter()
                    .zip(&t.data)
                    .map(|(&a, &b)| apply(a, b))
                    .collect::<Result<Vec<_>>>()?
            }
            Operand::Scalar(s) => self
                .data
                .iter()
                .map(|&a| apply(a, s))
                .collect::<Result<Vec<_>>>()?,
            Operand::PerChannel(v) => {
                if v.len() != self.channels() {
                    return shape_err(format!(
                        "per-channel operand of length {} for {} channels",
                        v.len(),
                        self.channels()
                    ));
                }
                let plane = self.plane_len().max(1);
                self.data
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| apply(a, v[(i / plane) % v.len()]))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Tensor4 {
            dims: self.dims,
            data,
        })
    }

    pub fn add(&self, rhs: Operand<'_>) -> Result<Tensor4> {
        self.elementwise(rhs, BinaryOp::Add)
    }

    pub fn sub(&self, rhs: Operand<'_>) -> Result<Tensor4> {
        self.elementwise(rhs, BinaryOp::Sub)
    }

    pub fn mul(&self, rhs: Operand<'_>) -> Result<Tensor4> {
        self.elementwise(rhs, BinaryOp::Mul)
    }

    pub fn div(&self, rhs: Operand<'_>) -> Result<Tensor4> {
        self.elementwise(rhs, BinaryOp::Div)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.check_same_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// A `(B, G, C/G, H, W)` view of a tensor's channels.
///
/// Row-major layout makes every `(b, g)` group a contiguous slice of the
/// underlying buffer, so the view owns the tensor without copying.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupView {
    base: Tensor4,
    groups: usize,
}

impl GroupView {
    pub fn new(base: Tensor4, groups: usize) -> Result<Self> {
        let channels = base.channels();
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidGrouping { channels, groups });
        }
        Ok(Self { base, groups })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels_per_group(&self) -> usize {
        self.base.channels() / self.groups
    }

    /// Logical dims `(B, G, C/G, H, W)`.
    pub fn dims(&self) -> [usize; 5] {
        let [b, _, h, w] = self.base.dims();
        [b, self.groups, self.channels_per_group(), h, w]
    }

    pub fn get(&self, b: usize, g: usize, k: usize, h: usize, w: usize) -> f64 {
        self.base.get(b, g * self.channels_per_group() + k, h, w)
    }

    /// Number of elements in one `(b, g)` slice.
    pub fn group_len(&self) -> usize {
        self.channels_per_group() * self.base.plane_len()
    }

    pub fn group(&self, b: usize, g: usize) -> &[f64] {
        let n = self.group_len();
        let start = (b * self.groups + g) * n;
        &self.base.data[start..start + n]
    }

    pub fn group_mut(&mut self, b: usize, g: usize) -> &mut [f64] {
        let n = self.group_len();
        let start = (b * self.groups + g) * n;
        &mut self.base.data[start..start + n]
    }

    pub fn base(&self) -> &Tensor4 {
        &self.base
    }

    /// Inverse reshape back to `(B, C, H, W)`.
    pub fn into_tensor(self) -> Tensor4 {
        self.base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reduce_over_batch() {
        let x = Tensor4::new([2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let m = x.reduce_stats(Axes::PER_CHANNEL).unwrap();
        assert_eq!(m.mean.dims(), [1, 1, 1, 1]);
        assert_eq!(m.mean.data(), &[2.0]);
        assert_eq!(m.var.data(), &[1.0]);
    }

    #[test]
    fn reduce_constant() {
        let x = Tensor4::full([3, 2, 4, 4], 2.5);
        let m = x.reduce_stats(Axes::ALL).unwrap();
        assert_eq!(m.mean.data(), &[2.5]);
        assert_eq!(m.var.data(), &[0.0]);
    }

    #[test]
    fn reduce_no_axes_is_identity() {
        let x = Tensor4::from_fn([2, 2, 2, 2], |b, c, h, w| {
            (b * 8 + c * 4 + h * 2 + w) as f64
        });
        let m = x.reduce_stats(Axes::NONE).unwrap();
        assert_eq!(m.mean, x);
        assert!(m.var.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduce_empty_is_error() {
        let x = Tensor4::zeros([0, 2, 2, 2]);
        assert!(matches!(
            x.reduce_stats(Axes::PER_CHANNEL),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn reduce_mixed_axes() {
        // (B=2, C=2, H=1, W=2) reduced over {C, W}: one slot per sample.
        let x = Tensor4::new([2, 2, 1, 2], vec![1., 2., 3., 4., 0., 0., 0., 8.]).unwrap();
        let m = x.reduce_stats(Axes::CHANNEL | Axes::WIDTH).unwrap();
        assert_eq!(m.mean.dims(), [2, 1, 1, 1]);
        assert_eq!(m.mean.data(), &[2.5, 2.0]);
        assert_eq!(m.var.data(), &[1.25, 12.0]);
    }

    #[test]
    fn group_membership() {
        let x = Tensor4::from_fn([1, 4, 1, 1], |_, c, _, _| c as f64);
        let v = x.group_reshape(2).unwrap();
        assert_eq!(v.dims(), [1, 2, 2, 1, 1]);
        assert_eq!(v.group(0, 0), &[0.0, 1.0]);
        assert_eq!(v.group(0, 1), &[2.0, 3.0]);
        assert_eq!(v.get(0, 1, 1, 0, 0), 3.0);
    }

    #[test]
    fn group_extremes() {
        let x = Tensor4::from_fn([2, 6, 2, 2], |b, c, h, w| {
            (b * 100 + c * 10 + h * 2 + w) as f64
        });
        let one = x.clone().group_reshape(1).unwrap();
        assert_eq!(one.group_len(), 24);
        let inst = x.clone().group_reshape(6).unwrap();
        assert_eq!(inst.group(1, 5), x.plane(1, 5));
    }

    #[test]
    fn group_must_divide() {
        let x = Tensor4::zeros([1, 6, 1, 1]);
        assert_eq!(
            x.clone().group_reshape(4).unwrap_err(),
            Error::InvalidGrouping {
                channels: 6,
                groups: 4
            }
        );
        assert!(x.group_reshape(0).is_err());
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = rand::rng();
        let x = Tensor4::randn([2, 3, 4, 4], &mut rng);
        assert_eq!(x.add(Operand::Scalar(0.0)).unwrap(), x);
        assert_eq!(x.mul(Operand::Scalar(1.0)).unwrap(), x);
    }

    #[test]
    fn elementwise_sub() {
        let x = Tensor4::new([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let y = Tensor4::full([1, 2, 1, 1], 0.5);
        assert_eq!(x.sub(Operand::Tensor(&y)).unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn elementwise_errors() {
        let x = Tensor4::full([1, 2, 2, 2], 1.0);
        let y = Tensor4::full([1, 2, 2, 1], 1.0);
        assert!(matches!(
            x.add(Operand::Tensor(&y)),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            x.div(Operand::Scalar(0.0)),
            Err(Error::DegenerateDivisor(_))
        ));
        assert!(x.add(Operand::PerChannel(&[1.0])).is_err());
    }

    #[test]
    fn per_channel_broadcast() {
        let x = Tensor4::zeros([2, 3, 2, 2]);
        let y = x.add(Operand::PerChannel(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.get(1, 2, 1, 0), 3.0);
        assert_eq!(y.get(0, 0, 0, 1), 1.0);
    }

    proptest! {
        #[test]
        fn group_round_trip(b in 1usize..4, cpg in 1usize..4, g in 1usize..5, hw in 1usize..4, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor4::randn([b, cpg * g, hw, hw], &mut rng);
            let back = x.clone().group_reshape(g).unwrap().into_tensor();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn variance_non_negative(data in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = data.len();
            let x = Tensor4::new([1, 1, 1, n], data.clone()).unwrap();
            let m = x.reduce_stats(Axes::ALL).unwrap();
            prop_assert!(m.var.data()[0] >= 0.0);
            let constant = data.iter().all(|&v| v == data[0]);
            prop_assert_eq!(m.var.data()[0] == 0.0, constant);
        }

        #[test]
        fn broadcast_then_reduce(v in proptest::collection::vec(-10.0f64..10.0, 1..6), b in 1usize..5, hw in 1usize..6) {
            let x = Tensor4::zeros([b, v.len(), hw, hw]).add(Operand::PerChannel(&v)).unwrap();
            let (mean, _) = x.channel_moments().unwrap();
            for (m, e) in mean.iter().zip(&v) {
                prop_assert!((m - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }
}
