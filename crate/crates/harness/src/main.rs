use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use normlab_core::diagnostics::elimination_probe;
use normlab_harness::report::{curves_csv, statdiff_csv, write_json, write_text};
use normlab_harness::suite::{run_gradient_suite, DEFAULT_SEEDS};
use normlab_harness::sweep::{run_singularity_sweep, summarize, sweep_csv, SweepConfig};
use normlab_harness::trace::{self, run_statdiff_trace, TraceConfig};
use normlab_harness::train::{train, Checkpoint, TrainConfig};
use normlab_harness::{read_json, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "normlab",
    version,
    about = "Normalization experiments on a small NCHW tensor core"
)]
struct Cli {
    /// Directory for artifacts.
    #[arg(long, global = true, default_value = "normlab-out")]
    out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CIFAR-10 binary directory; overrides the config and NORMLAB_DATA.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// One training run: curves.csv, summary.json, checkpoint.json and,
    /// with diagnostics on, statdiff.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fixed-statistics sweep: sweep.csv and summary.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// StatDiff trace: one directory per normalizer plus summary.json.
    Statdiff {
        #[arg(long)]
        config: PathBuf,
    },
    /// Deactivated-channel report of a checkpoint on its test split.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Near-deactivation threshold.
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Probe only the first `n` test images.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let data = cli.data.as_deref();
    match &cli.command {
        Command::Gradcheck { seeds } => gradcheck(*seeds),
        Command::Train { config } => {
            let mut cfg: TrainConfig = read_json(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            run_train(&cfg, data, &cli.out)
        }
        Command::Sweep { config } => {
            let mut cfg: SweepConfig = read_json(config)?;
            cfg.base.seed = cli.seed.unwrap_or(cfg.base.seed);
            cfg.validate()?;
            let dataset = cfg.base.load_data(data)?;
            let results = run_singularity_sweep(&cfg, &dataset)?;
            write_text(&cli.out.join("sweep.csv"), &sweep_csv(&results))?;
            let summary = summarize(&results, cfg.threshold);
            write_json(&cli.out.join("summary.json"), &summary)?;
            for c in &summary.cells {
                println!(
                    "sigma_mu={} sigma_sigma={} mean_accuracy={:.4} failures={}/{}",
                    c.sigma_mu, c.sigma_sigma, c.mean_accuracy, c.failures, c.runs
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Statdiff { config } => {
            let mut cfg: TraceConfig = read_json(config)?;
            cfg.base.seed = cli.seed.unwrap_or(cfg.base.seed);
            cfg.validate()?;
            let dataset = cfg.base.load_data(data)?;
            let runs = run_statdiff_trace(&cfg, &dataset)?;
            for r in &runs {
                let dir = cli.out.join(&r.label);
                write_text(
                    &dir.join("statdiff.csv"),
                    &statdiff_csv(&r.outcome.statdiff),
                )?;
                write_text(&dir.join("curves.csv"), &curves_csv(&r.outcome.curves))?;
                println!(
                    "{}: final mean statdiff {:.4}",
                    r.label,
                    r.epoch_means().last().copied().unwrap_or(f64::NAN)
                );
            }
            write_json(&cli.out.join("summary.json"), &trace::summarize(&runs))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Probe {
            checkpoint,
            tau,
            limit,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let mut model = ckpt.restore()?;
            let mut test = ckpt.config.load_data(data)?.test;
            if let Some(n) = limit {
                test = test.truncated(*n);
            }
            let indices: Vec<usize> = (0..test.len()).collect();
            let batches = indices
                .chunks(ckpt.config.eval_batch_size)
                .map(|chunk| test.batch(chunk).0);
            let report = elimination_probe(&mut model, batches, *tau)?;
            let layers: Vec<_> = report
                .layers
                .iter()
                .map(|l| {
                    json!({
                        "layer": l.layer,
                        "deactivated_fraction": l.deactivated_fraction,
                        "near_deactivated_fraction": l.near_deactivated_fraction,
                        "max_activation": l.max_activation,
                    })
                })
                .collect();
            let summary = json!({
                "tau": report.tau,
                "deactivated_fraction": report.deactivated_fraction(),
                "layers": layers,
            });
            write_json(&cli.out.join("summary.json"), &summary)?;
            for l in &report.layers {
                println!(
                    "layer {}: deactivated {:.4}, below tau {:.4}",
                    l.layer, l.deactivated_fraction, l.near_deactivated_fraction
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gradcheck(seeds: u64) -> Result<ExitCode> {
    let entries = run_gradient_suite(seeds);
    for e in &entries {
        println!(
            "{:<4} {:<15} max rel err {:.3e} ({})",
            if e.passed { "ok" } else { "FAIL" },
            e.operation,
            e.max_rel_error,
            e.worst
        );
    }
    Ok(if entries.iter().all(|e| e.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run_train(cfg: &TrainConfig, data: Option<&Path>, out: &Path) -> Result<ExitCode> {
    cfg.validate()?;
    let dataset = cfg.load_data(data)?;
    let mut run = train(cfg, &dataset)?;
    let o = &run.outcome;
    write_text(&out.join("curves.csv"), &curves_csv(&o.curves))?;
    if cfg.diagnostics.is_some() {
        write_text(&out.join("statdiff.csv"), &statdiff_csv(&o.statdiff))?;
    }
    write_json(
        &out.join("summary.json"),
        &json!({
            "normalizer": cfg.normalizer.label(),
            "final_accuracy": o.final_accuracy(),
            "diverged": o.diverged,
            "curves": o.curves,
            "statdiff": trace::epoch_summaries(&o.statdiff),
        }),
    )?;
    Checkpoint::capture(cfg, &mut run.model).save(&out.join("checkpoint.json"))?;
    for e in &o.curves {
        println!(
            "epoch {:>3}  loss {:.4}  train err {:.4}  test err {:.4}",
            e.epoch, e.train_loss, e.train_err, e.test_err
        );
    }
    if let Some(d) = &o.diverged {
        eprintln!(
            "diverged at epoch {} step {}: loss {}",
            d.epoch, d.step, d.loss
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
