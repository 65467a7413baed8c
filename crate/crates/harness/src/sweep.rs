//! The fixed-statistics sweep: accuracy as the pre-defined channel
//! statistics move away from those of batch normalization.

use normlab_core::norm::NormKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Cifar10;
use crate::error::{config_err, HarnessError, Result};
use crate::report::fmt_float;
use crate::train::{train, EpochRecord, TrainConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.70;
pub const SWEEP_HEADER: &str = "sigma_mu,sigma_sigma,seed,accuracy,failed,distance";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Recipe of every cell; its normalizer is replaced by the `fixed` kind
    /// while eps, momentum and ws carry over.
    pub base: TrainConfig,
    #[serde(default = "default_grid")]
    pub sigma_mu: Vec<f64>,
    #[serde(default = "default_grid")]
    pub sigma_sigma: Vec<f64>,
    /// Runs per cell, seeded `base.seed`, `base.seed + 1`, ...
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Parallel cells; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_grid() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 3.0]
}

fn default_seeds() -> usize {
    3
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl SweepConfig {
    pub fn new(base: TrainConfig) -> Self {
        Self {
            base,
            sigma_mu: default_grid(),
            sigma_sigma: default_grid(),
            seeds: default_seeds(),
            threshold: default_threshold(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.sigma_mu.is_empty() || self.sigma_sigma.is_empty() || self.seeds == 0 {
            return config_err("sweep grids and seed count must be non-empty");
        }
        if self
            .sigma_mu
            .iter()
            .chain(&self.sigma_sigma)
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return config_err("sweep spreads must be finite and >= 0");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return config_err(format!("threshold {} not in (0, 1)", self.threshold));
        }
        Ok(())
    }

    /// The training config of one cell.
    pub fn cell(&self, sigma_mu: f64, sigma_sigma: f64, seed: u64) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.normalizer.kind = NormKind::Fixed;
        cfg.normalizer.sigma_mu = sigma_mu;
        cfg.normalizer.sigma_sigma = sigma_sigma;
        cfg.seed = seed;
        cfg
    }

    /// `(sigma_mu, sigma_sigma, seed)` of every run, in output order.
    pub fn cells(&self) -> Vec<(f64, f64, u64)> {
        let mut mu = self.sigma_mu.clone();
        mu.sort_by(f64::total_cmp);
        let mut sigma = self.sigma_sigma.clone();
        sigma.sort_by(f64::total_cmp);
        let mut out = Vec::new();
        for &m in &mu {
            for &s in &sigma {
                for i in 0..self.seeds {
                    out.push((m, s, self.base.seed + i as u64));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub sigma_mu: f64,
    pub sigma_sigma: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub failed: bool,
    pub distance: f64,
    pub diverged: bool,
    pub curves: Vec<EpochRecord>,
}

pub fn is_failure(accuracy: f64, threshold: f64) -> bool {
    accuracy < threshold
}

fn run_cell(
    cfg: &SweepConfig,
    data: &Cifar10,
    (m, s, seed): (f64, f64, u64),
) -> Result<SweepResult> {
    let outcome = train(&cfg.cell(m, s, seed), data)?.outcome;
    let accuracy = outcome.final_accuracy();
    Ok(SweepResult {
        sigma_mu: m,
        sigma_sigma: s,
        seed,
        accuracy,
        failed: outcome.diverged.is_some() || is_failure(accuracy, cfg.threshold),
        distance: m.hypot(s),
        diverged: outcome.diverged.is_some(),
        curves: outcome.curves,
    })
}

/// Trains every cell, in parallel, and returns the results sorted by
/// `(sigma_mu, sigma_sigma, seed)`.
pub fn run_singularity_sweep(cfg: &SweepConfig, data: &Cifar10) -> Result<Vec<SweepResult>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|&c| run_cell(cfg, data, c)).collect())
}

pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_float(r.sigma_mu),
            fmt_float(r.sigma_sigma),
            r.seed,
            fmt_float(r.accuracy),
            r.failed,
            fmt_float(r.distance)
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub sigma_mu: f64,
    pub sigma_sigma: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub failures: usize,
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub threshold: f64,
    pub cells: Vec<CellSummary>,
    /// Rank correlation between distance to the origin and accuracy over
    /// all runs.
    pub distance_accuracy_spearman: f64,
}

impl SweepSummary {
    pub fn cell(&self, sigma_mu: f64, sigma_sigma: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.sigma_mu == sigma_mu && c.sigma_sigma == sigma_sigma)
    }
}

pub fn summarize(results: &[SweepResult], threshold: f64) -> SweepSummary {
    let mut cells: Vec<CellSummary> = Vec::new();
    for r in results {
        let cell = match cells
            .iter_mut()
            .find(|c| c.sigma_mu == r.sigma_mu && c.sigma_sigma == r.sigma_sigma)
        {
            Some(c) => c,
            None => {
                cells.push(CellSummary {
                    sigma_mu: r.sigma_mu,
                    sigma_sigma: r.sigma_sigma,
                    runs: 0,
                    mean_accuracy: 0.0,
                    failures: 0,
                    diverged: 0,
                });
                cells.last_mut().expect("just pushed")
            }
        };
        cell.runs += 1;
        cell.mean_accuracy += (r.accuracy - cell.mean_accuracy) / cell.runs as f64;
        cell.failures += usize::from(r.failed);
        cell.diverged += usize::from(r.diverged);
    }
    let distance: Vec<f64> = results.iter().map(|r| r.distance).collect();
    let accuracy: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    SweepSummary {
        threshold,
        cells,
        distance_accuracy_spearman: spearman(&distance, &accuracy),
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
