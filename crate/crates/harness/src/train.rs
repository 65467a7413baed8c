//! Training runs: config, the epoch loop, evaluation and checkpoints.

use std::path::{Path, PathBuf};

use normlab_core::diagnostics::{
    record_stats, statdiff_report, ChannelStatRecord, StatDiffReport, DEFAULT_RECORD_MOMENTUM,
};
use normlab_core::layers::{softmax_xent, Graph, SgdConfig};
use normlab_core::norm::{NormKind, NormSpec};
use normlab_core::{Layer, Mode, Tensor4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, load_cifar10, synthetic_dataset, Cifar10, Cifar10Set, SyntheticSpec};
use crate::error::{config_err, io_err, HarnessError, Result};
use crate::models::{build_model, ModelSpec};

/// Environment variable naming the CIFAR-10 binary directory.
pub const DATA_ENV: &str = "NORMLAB_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Cifar10 {
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

impl DataSource {
    /// The CIFAR directory is taken from `data_override`, then the config,
    /// then `NORMLAB_DATA`.
    pub fn load(&self, data_override: Option<&Path>) -> Result<Cifar10> {
        match self {
            DataSource::Synthetic { spec } => synthetic_dataset(spec),
            DataSource::Cifar10 { path } => {
                let dir = data_override
                    .map(Path::to_path_buf)
                    .or_else(|| path.clone())
                    .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from));
                match dir {
                    Some(dir) => load_cifar10(&dir),
                    None => config_err(format!(
                        "no CIFAR-10 directory: set {DATA_ENV} or pass --data"
                    )),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Per-iteration cosine decay from the base rate to zero.
    #[default]
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total == 0 => base,
            Schedule::Cosine => {
                0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

/// Which tensor around each normalizer feeds the running channel records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// The convolution output entering the normalizer.
    #[default]
    Input,
    /// The normalizer output before its affine transform.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default)]
    pub tap: Tap,
    #[serde(default = "default_record_momentum")]
    pub momentum: f64,
}

fn default_record_momentum() -> f64 {
    DEFAULT_RECORD_MOMENTUM
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            tap: Tap::Input,
            momentum: DEFAULT_RECORD_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub normalizer: NormSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_sgd")]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment: bool,
    pub data: DataSource,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsConfig>,
    /// Use only the first `n` training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    128
}

fn default_sgd() -> SgdConfig {
    SgdConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
    }
}

fn default_true() -> bool {
    true
}

fn default_eval_batch_size() -> usize {
    100
}

impl TrainConfig {
    /// The declared CIFAR recipe around `model`, `normalizer` and `data`.
    pub fn new(model: ModelSpec, normalizer: NormSpec, data: DataSource) -> Self {
        Self {
            model,
            normalizer,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            sgd: default_sgd(),
            schedule: Schedule::default(),
            seed: 0,
            augment: true,
            data,
            diagnostics: None,
            train_limit: None,
            test_limit: None,
            eval_batch_size: default_eval_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.normalizer.validate()?;
        self.sgd.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return config_err("batch sizes must be positive");
        }
        if let Some(d) = &self.diagnostics {
            if !(d.momentum > 0.0 && d.momentum <= 1.0) {
                return config_err(format!("diagnostics momentum {} not in (0, 1]", d.momentum));
            }
        }
        Ok(())
    }

    pub fn load_data(&self, data_override: Option<&Path>) -> Result<Cifar10> {
        let data = self.data.load(data_override)?;
        Ok(data.truncated(self.train_limit, self.test_limit))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Error of the training-mode predictions made during the epoch.
    pub train_err: f64,
    pub test_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutcome {
    pub curves: Vec<EpochRecord>,
    pub diverged: Option<Divergence>,
    /// One report per epoch when diagnostics are on.
    pub statdiff: Vec<StatDiffReport>,
}

impl RunOutcome {
    /// Test accuracy after the last epoch; zero for a diverged run.
    pub fn final_accuracy(&self) -> f64 {
        match (&self.diverged, self.curves.last()) {
            (None, Some(last)) => 1.0 - last.test_err,
            _ => 0.0,
        }
    }
}

pub struct TrainRun {
    pub model: Graph,
    pub outcome: RunOutcome,
}

/// Fraction of `set` the model classifies correctly in eval mode.
pub fn evaluate(model: &mut Graph, set: &Cifar10Set, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(HarnessError::Config("evaluation on an empty set".into()));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = set.batch(chunk);
        let logits = model.forward(&x, Mode::Eval)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / set.len() as f64)
}

fn count_correct(logits: &Tensor4, labels: &[usize]) -> usize {
    let k = logits.channels();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == label
        })
        .count()
}

struct Recorder {
    tap: Tap,
    records: Vec<ChannelStatRecord>,
    groups: Vec<usize>,
}

impl Recorder {
    fn new(model: &mut Graph, cfg: &DiagnosticsConfig) -> Self {
        let mut records = Vec::new();
        let mut groups = Vec::new();
        model.visit_normalizers_mut(&mut |n| {
            n.set_tapping(true);
            groups.push(n.groups());
        });
        records.extend((0..groups.len()).map(|l| ChannelStatRecord::new(l, 0, cfg.momentum)));
        Self {
            tap: cfg.tap,
            records,
            groups,
        }
    }

    fn record(&mut self, model: &Graph) -> Result<()> {
        let mut taps = Vec::with_capacity(self.records.len());
        model.visit_normalizers(&mut |n| {
            taps.push(match self.tap {
                Tap::Input => n.last_input().cloned(),
                Tap::Normalized => n.normalized(),
            })
        });
        for (rec, tap) in self.records.iter_mut().zip(taps) {
            let Some(t) = tap else { continue };
            if rec.count == 0 && rec.channels() != t.channels() {
                *rec = ChannelStatRecord::new(rec.layer, t.channels(), rec.momentum);
            }
            record_stats(rec, &t)?;
        }
        Ok(())
    }

    fn report(&self, epoch: usize) -> Result<StatDiffReport> {
        Ok(statdiff_report(&self.records, &self.groups, epoch)?)
    }
}

/// Trains a freshly built model on `data`. A non-finite loss ends the run
/// early and is reported in the outcome rather than as an error.
pub fn train(config: &TrainConfig, data: &Cifar10) -> Result<TrainRun> {
    config.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return config_err("training needs non-empty train and test splits");
    }
    if !data
        .train
        .side()
        .is_multiple_of(config.model.side_multiple())
    {
        return config_err(format!(
            "image side {} is not a multiple of {}",
            data.train.side(),
            config.model.side_multiple()
        ));
    }
    let mut model = build_model(&config.model, &config.normalizer, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut recorder = config
        .diagnostics
        .as_ref()
        .map(|d| Recorder::new(&mut model, d));
    let follow_lr =
        config.normalizer.kind == NormKind::BcnMicro && config.normalizer.update_rate.is_none();

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut sgd = config.sgd;
    let mut outcome = RunOutcome {
        curves: Vec::with_capacity(config.epochs),
        diverged: None,
        statdiff: Vec::new(),
    };

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (i, chunk) in order.chunks(config.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + i;
            sgd.lr = config.schedule.rate(config.sgd.lr, step, total);
            if follow_lr {
                let r = sgd.lr.min(1.0);
                model.visit_normalizers_mut(&mut |nz| nz.set_update_rate(r));
            }
            let (mut x, labels) = data.train.batch(chunk);
            if config.augment {
                augment(&mut x, &mut rng);
            }
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                outcome.diverged = Some(Divergence { epoch, step, loss });
                break 'epochs;
            }
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(&logits, &labels);
            model.zero_grad();
            model.backward(&dlogits)?;
            model.sgd_step(&sgd);
            if let Some(r) = &mut recorder {
                r.record(&model)?;
            }
        }
        let test_acc = evaluate(&mut model, &data.test, config.eval_batch_size)?;
        outcome.curves.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_err: 1.0 - correct as f64 / n as f64,
            test_err: 1.0 - test_acc,
        });
        if let Some(r) = &recorder {
            outcome.statdiff.push(r.report(epoch)?);
        }
    }
    if recorder.is_some() {
        model.visit_normalizers_mut(&mut |nz| nz.set_tapping(false));
    }
    Ok(TrainRun { model, outcome })
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, model: &mut Graph) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |p| params.push(p.value.clone()));
        let mut buffers = Vec::new();
        model.visit_buffers(&mut |b| buffers.push(b.clone()));
        Self {
            config: config.clone(),
            params,
            buffers,
        }
    }

    pub fn restore(&self) -> Result<Graph> {
        let mut model = build_model(
            &self.config.model,
            &self.config.normalizer,
            self.config.seed,
        )?;
        let mut shapes_ok = true;
        let mut params = self.params.iter();
        model.visit_params(&mut |p| match params.next() {
            Some(v) if v.len() == p.len() => p.value.clone_from(v),
            _ => shapes_ok = false,
        });
        let mut buffers = self.buffers.iter();
        model.visit_buffers(&mut |b| match buffers.next() {
            Some(v) if v.len() == b.len() => b.clone_from(v),
            _ => shapes_ok = false,
        });
        if !shapes_ok || params.next().is_some() || buffers.next().is_some() {
            return config_err("checkpoint does not match its model");
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|source| HarnessError::Json {
            context: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, json).map_err(io_err(path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::read_json(path)
    }
}
