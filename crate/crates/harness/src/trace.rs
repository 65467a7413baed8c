//! StatDiff traces of the residual network under several normalizers.

use normlab_core::diagnostics::StatDiffReport;
use normlab_core::norm::{NormKind, NormSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Cifar10;
use crate::error::{config_err, HarnessError, Result};
use crate::train::{train, DiagnosticsConfig, RunOutcome, Tap, TrainConfig};

pub const CONTROL_LABEL: &str = "bn-control";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub base: TrainConfig,
    #[serde(default = "default_normalizers")]
    pub normalizers: Vec<NormSpec>,
    /// Adds a batch-norm run recorded after normalization, where every
    /// channel has the same statistics.
    #[serde(default = "default_true")]
    pub bn_control: bool,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_normalizers() -> Vec<NormSpec> {
    [NormKind::Gn, NormKind::Ln]
        .into_iter()
        .flat_map(|k| [false, true].map(|ws| NormSpec::new(k).with_ws(ws)))
        .collect()
}

fn default_true() -> bool {
    true
}

impl TraceConfig {
    pub fn new(base: TrainConfig) -> Self {
        Self {
            base,
            normalizers: default_normalizers(),
            bn_control: true,
            workers: None,
        }
    }

    /// `(label, config)` of every run.
    pub fn runs(&self) -> Vec<(String, TrainConfig)> {
        let diagnostics = self.base.diagnostics.clone().unwrap_or_default();
        let mut out: Vec<(String, TrainConfig)> = self
            .normalizers
            .iter()
            .map(|n| {
                let mut cfg = self.base.clone();
                cfg.normalizer = n.clone();
                cfg.diagnostics = Some(diagnostics.clone());
                (n.label(), cfg)
            })
            .collect();
        if self.bn_control {
            let mut cfg = self.base.clone();
            cfg.normalizer = NormSpec::new(NormKind::Bn).with_ws(false);
            cfg.diagnostics = Some(DiagnosticsConfig {
                tap: Tap::Normalized,
                ..diagnostics
            });
            out.push((CONTROL_LABEL.to_string(), cfg));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.normalizers.is_empty() && !self.bn_control {
            return config_err("trace has no runs");
        }
        let runs = self.runs();
        for (i, (label, _)) in runs.iter().enumerate() {
            if runs[..i].iter().any(|(l, _)| l == label) {
                return config_err(format!("duplicate trace run {label}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRun {
    pub label: String,
    pub outcome: RunOutcome,
}

impl TraceRun {
    /// Per-epoch mean StatDiff over all groups of all layers.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.outcome.statdiff.iter().map(|r| r.group_mean).collect()
    }
}

pub fn run_statdiff_trace(cfg: &TraceConfig, data: &Cifar10) -> Result<Vec<TraceRun>> {
    cfg.validate()?;
    let runs = cfg.runs();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        runs.par_iter()
            .map(|(label, run_cfg)| {
                Ok(TraceRun {
                    label: label.clone(),
                    outcome: train(run_cfg, data)?.outcome,
                })
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEpoch {
    pub epoch: usize,
    pub group_mean: f64,
    pub group_std: f64,
    pub layer_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRunSummary {
    pub label: String,
    pub final_accuracy: f64,
    pub diverged: bool,
    pub epochs: Vec<TraceEpoch>,
}

pub fn epoch_summaries(reports: &[StatDiffReport]) -> Vec<TraceEpoch> {
    reports
        .iter()
        .map(|s| TraceEpoch {
            epoch: s.epoch,
            group_mean: s.group_mean,
            group_std: s.group_std,
            layer_mean: s.layer_mean,
        })
        .collect()
}

pub fn summarize(runs: &[TraceRun]) -> Vec<TraceRunSummary> {
    runs.iter()
        .map(|r| TraceRunSummary {
            label: r.label.clone(),
            final_accuracy: r.outcome.final_accuracy(),
            diverged: r.outcome.diverged.is_some(),
            epochs: epoch_summaries(&r.outcome.statdiff),
        })
        .collect()
}
