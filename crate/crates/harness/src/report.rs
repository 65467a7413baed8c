//! CSV and JSON artifacts. Floats are written with 9 significant digits so
//! reruns with the same seed give identical files.

use std::fmt::Write as _;
use std::path::Path;

use normlab_core::diagnostics::StatDiffReport;
use serde::Serialize;

use crate::error::{io_err, HarnessError, Result};
use crate::train::EpochRecord;

pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

pub const CURVES_HEADER: &str = "epoch,train_err,test_err";
pub const STATDIFF_HEADER: &str = "epoch,layer,group,statdiff";

pub fn curves_csv(curves: &[EpochRecord]) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for e in curves {
        let _ = writeln!(
            out,
            "{},{},{}",
            e.epoch,
            fmt_float(e.train_err),
            fmt_float(e.test_err)
        );
    }
    out
}

pub fn statdiff_csv(reports: &[StatDiffReport]) -> String {
    let mut out = format!("{STATDIFF_HEADER}\n");
    for r in reports {
        for layer in &r.layers {
            for (g, v) in layer.groups.iter().enumerate() {
                let _ = writeln!(out, "{},{},{g},{}", r.epoch, layer.layer, fmt_float(*v));
            }
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir.display()))?;
    }
    std::fs::write(path, text).map_err(io_err(path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| HarnessError::Json {
        context: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use normlab_core::diagnostics::LayerStatDiff;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_float(0.7), "7.00000000e-1");
        assert_eq!(fmt_float(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_float(0.0), "0.00000000e0");
    }

    #[test]
    fn statdiff_rows() {
        let r = StatDiffReport {
            epoch: 2,
            layers: vec![LayerStatDiff {
                layer: 1,
                groups: vec![1.0, 0.5],
                mean: 0.75,
            }],
            group_mean: 0.75,
            group_std: 0.25,
            layer_mean: 0.75,
        };
        assert_eq!(
            statdiff_csv(&[r]),
            "epoch,layer,group,statdiff\n2,1,0,1.00000000e0\n2,1,1,5.00000000e-1\n"
        );
    }
}
