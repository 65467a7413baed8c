//! Weight standardization: each output row of a convolution weight is
//! reparameterized to zero mean and unit sum of squares.

use crate::error::{shape_err, Error, Result};
use crate::layers::{ConvParams, Param};
use crate::tensor::slice_moments;

/// Guard inside `sqrt(sum(w^2) + eps)`.
pub const WS_EPS: f64 = 1e-10;

/// What the backward pass of a standardization needs.
#[derive(Clone, Debug)]
pub struct RowStandardization {
    centered: Vec<f64>,
    inv_norm: Vec<f64>,
    row_len: usize,
}

/// Standardizes `rows` equal-length rows of `weight`.
pub fn standardize_rows(
    weight: &[f64],
    rows: usize,
    eps: f64,
) -> Result<(Vec<f64>, RowStandardization)> {
    if rows == 0 || !weight.len().is_multiple_of(rows) {
        return shape_err(format!(
            "{} weights do not split into {rows} rows",
            weight.len()
        ));
    }
    let row_len = weight.len() / rows;
    if row_len < 2 {
        return shape_err(format!(
            "weight standardization needs fan-in >= 2, got {row_len}"
        ));
    }
    let mut centered = Vec::with_capacity(weight.len());
    let mut inv_norm = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(weight.len());
    for (row, w) in weight.chunks(row_len).enumerate() {
        let (mean, var) = slice_moments(w);
        if var == 0.0 {
            return Err(Error::DegenerateRow { row });
        }
        let start = centered.len();
        centered.extend(w.iter().map(|v| v - mean));
        let c = &centered[start..];
        let s = 1.0 / (c.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        out.extend(c.iter().map(|v| v * s));
        inv_norm.push(s);
    }
    Ok((
        out,
        RowStandardization {
            centered,
            inv_norm,
            row_len,
        },
    ))
}

/// Maps a gradient wrt the standardized weight back to the raw weight.
pub fn standardize_rows_backward(grad: &[f64], cache: &RowStandardization) -> Vec<f64> {
    let n = cache.row_len;
    let mut out = Vec::with_capacity(grad.len());
    for ((g, c), &s) in grad
        .chunks(n)
        .zip(cache.centered.chunks(n))
        .zip(&cache.inv_norm)
    {
        let gc: f64 = g.iter().zip(c).map(|(a, b)| a * b).sum();
        let s3 = s * s * s;
        let start = out.len();
        out.extend(g.iter().zip(c).map(|(gi, ci)| s * gi - ci * s3 * gc));
        let row = &mut out[start..];
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Returns a copy of `raw` whose weight rows satisfy `sum_i W[c,i] = 0` and
/// `sum_i W[c,i]^2 = 1` (up to `WS_EPS`).
pub fn ws_standardize(raw: &ConvParams) -> Result<ConvParams> {
    let (w, _) = standardize_rows(&raw.weight.value, raw.out_channels, WS_EPS)?;
    let mut out = raw.clone();
    out.weight = Param::new(w);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_with_rows(rows: &[&[f64]]) -> ConvParams {
        let fan_in = rows[0].len();
        let mut p = ConvParams::zeros(rows.len(), fan_in, 1, 1, 0, false).unwrap();
        p.weight.value = rows.concat();
        p
    }

    #[test]
    fn hand_row() {
        let out = ws_standardize(&conv_with_rows(&[&[1.0, 2.0, 3.0]])).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in out.weight.value.iter().zip([-r, 0.0, r]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn idempotent() {
        let once = ws_standardize(&conv_with_rows(&[&[0.3, -1.0, 2.0, 5.0]])).unwrap();
        let twice = ws_standardize(&once).unwrap();
        for (a, b) in once.weight.value.iter().zip(&twice.weight.value) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_row_is_degenerate() {
        let err = ws_standardize(&conv_with_rows(&[&[1.0, 2.0], &[4.0, 4.0]])).unwrap_err();
        assert_eq!(err, Error::DegenerateRow { row: 1 });
    }

    #[test]
    fn fan_in_one_rejected() {
        assert!(ws_standardize(&conv_with_rows(&[&[1.0]])).is_err());
    }
}
