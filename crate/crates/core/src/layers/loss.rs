use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / B` with respect to the logits.
pub fn softmax_xent(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let [b, k, h, w] = logits.dims();
    if h != 1 || w != 1 || b == 0 || k == 0 {
        return shape_err(format!(
            "logits must be non-empty (B, K, 1, 1), got {:?}",
            logits.dims()
        ));
    }
    if labels.len() != b {
        return shape_err(format!("{} labels for batch of {b}", labels.len()));
    }
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad[i * k..(i + 1) * k];
        for (gj, v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor4::matrix(b, k, grad)?))
}
