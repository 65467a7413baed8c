//! CIFAR-10 binary ingestion, the synthetic stand-in dataset and
//! augmentation.

use std::fs;
use std::path::Path;

use normlab_core::Tensor4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, HarnessError, Result};

pub const CLASSES: usize = 10;
pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const IMAGE_LEN: usize = CHANNELS * SIDE * SIDE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_LEN: usize = 1 + IMAGE_LEN;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
/// Largest shift applied by [`augment`], in pixels.
pub const MAX_SHIFT: usize = 4;

/// Per-channel mean and standard deviation of pixels scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    fn from_pixels(pixels: &[u8], side: usize) -> Self {
        let plane = side * side;
        let mut stats = Self::identity();
        if pixels.is_empty() {
            return stats;
        }
        for c in 0..CHANNELS {
            let values: Vec<f64> = pixels
                .chunks(CHANNELS * plane)
                .flat_map(|img| img[c * plane..(c + 1) * plane].iter())
                .map(|&p| f64::from(p) / 255.0)
                .collect();
            let (mean, var) = normlab_core::tensor::slice_moments(&values);
            stats.mean[c] = mean;
            // A constant channel is only centred.
            stats.std[c] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        stats
    }
}

/// Raw `u8` images with their labels. Standardization is applied on access
/// so the stored bytes stay exactly as read.
#[derive(Clone, Debug, PartialEq)]
pub struct Cifar10Set {
    side: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    stats: ChannelStats,
}

impl Cifar10Set {
    pub fn from_raw(side: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let image_len = CHANNELS * side * side;
        if side == 0 || pixels.len() != labels.len() * image_len {
            return config_err(format!(
                "{} pixel bytes for {} images of side {side}",
                pixels.len(),
                labels.len()
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= CLASSES) {
            return config_err(format!("label {l} out of range"));
        }
        Ok(Self {
            side,
            pixels,
            labels,
            stats: ChannelStats::identity(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = stats;
        self
    }

    /// Statistics of this set's own pixels.
    pub fn pixel_stats(&self) -> ChannelStats {
        ChannelStats::from_pixels(&self.pixels, self.side)
    }

    /// The first `n` images.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            side: self.side,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            stats: self.stats,
        }
    }

    /// Standardized image `i` written into `out`.
    pub fn write_image(&self, i: usize, out: &mut [f64]) {
        let plane = self.side * self.side;
        for (c, (dst, src)) in out
            .chunks_mut(plane)
            .zip(self.raw_image(i).chunks(plane))
            .enumerate()
        {
            let (m, s) = (self.stats.mean[c], self.stats.std[c]);
            for (d, &p) in dst.iter_mut().zip(src) {
                *d = (f64::from(p) / 255.0 - m) / s;
            }
        }
    }

    /// Stacks the standardized images at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let n = self.image_len();
        let mut data = vec![0.0; indices.len() * n];
        for (dst, &i) in data.chunks_mut(n).zip(indices) {
            self.write_image(i, dst);
        }
        let x = Tensor4::new([indices.len(), CHANNELS, self.side, self.side], data)
            .expect("batch dims match data length");
        (x, indices.iter().map(|&i| self.label(i)).collect())
    }

    /// Serializes back to the binary record format.
    pub fn to_records(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * (1 + self.image_len()));
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.raw_image(i));
        }
        out
    }
}

/// Train and test splits sharing the train split's standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Cifar10 {
    pub train: Cifar10Set,
    pub test: Cifar10Set,
}

impl Cifar10 {
    pub fn new(train: Cifar10Set, test: Cifar10Set) -> Result<Self> {
        if train.side() != test.side() {
            return config_err("train and test image sizes differ");
        }
        let stats = train.pixel_stats();
        Ok(Self {
            train: train.with_stats(stats),
            test: test.with_stats(stats),
        })
    }

    pub fn truncated(&self, train: Option<usize>, test: Option<usize>) -> Self {
        Self {
            train: train.map_or_else(|| self.train.clone(), |n| self.train.truncated(n)),
            test: test.map_or_else(|| self.test.clone(), |n| self.test.truncated(n)),
        }
    }
}

/// Splits a file image into labels and pixel bytes.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<Cifar10Set> {
    let corrupt = |reason: String| HarnessError::CorruptDataset {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.is_empty() {
        return Err(corrupt("empty file".into()));
    }
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(corrupt(format!(
            "{} bytes is not a multiple of the {RECORD_LEN}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
    for (i, rec) in bytes.chunks(RECORD_LEN).enumerate() {
        if usize::from(rec[0]) >= CLASSES {
            return Err(corrupt(format!("record {i} has label {}", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Cifar10Set::from_raw(SIDE, pixels, labels)
}

fn read_split(dir: &Path, files: &[&str]) -> Result<Cifar10Set> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(path.display()))?;
        let set = parse_records(&bytes, &path)?;
        labels.extend_from_slice(&set.labels);
        pixels.extend_from_slice(&set.pixels);
    }
    Cifar10Set::from_raw(SIDE, pixels, labels)
}

/// Reads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    Cifar10::new(
        read_split(dir, &TRAIN_FILES)?,
        read_split(dir, &[TEST_FILE])?,
    )
}

/// Class-conditional Gaussian blobs: every class owns a blob centre and a
/// colour, and `signal` scales the blob against additive pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub per_class: usize,
    #[serde(default)]
    pub test_per_class: usize,
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    CLASSES
}

fn default_signal() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.05
}

fn default_side() -> usize {
    SIDE
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, test_per_class: usize) -> Self {
        Self {
            classes,
            per_class,
            test_per_class,
            signal: default_signal(),
            noise: default_noise(),
            side: SIDE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=CLASSES).contains(&self.classes) {
            return config_err(format!("classes must be in 1..={CLASSES}"));
        }
        if self.per_class == 0 {
            return config_err("per_class must be positive");
        }
        if self.side == 0 {
            return config_err("side must be positive");
        }
        if !(0.0..=1.0).contains(&self.signal) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return config_err("signal must be in [0, 1] and noise >= 0");
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    color: [f64; CHANNELS],
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Cifar10> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.side as f64;
    let blobs: Vec<Blob> = (0..spec.classes)
        .map(|_| Blob {
            cx: rng.random_range(0.25..0.75) * side,
            cy: rng.random_range(0.25..0.75) * side,
            color: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let radius2 = (side / 5.0).powi(2);
    let mut split = |per_class: usize| {
        let mut pixels =
            Vec::with_capacity(per_class * spec.classes * CHANNELS * spec.side * spec.side);
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for (k, blob) in blobs.iter().enumerate() {
                labels.push(k as u8);
                for c in 0..CHANNELS {
                    for h in 0..spec.side {
                        for w in 0..spec.side {
                            let d2 = (h as f64 + 0.5 - blob.cy).powi(2)
                                + (w as f64 + 0.5 - blob.cx).powi(2);
                            let bump = blob.color[c] * (-0.5 * d2 / radius2).exp();
                            let noise: f64 = rng.sample(StandardNormal);
                            let v = 0.5 + 0.45 * spec.signal * bump + spec.noise * noise;
                            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                        }
                    }
                }
            }
        }
        Cifar10Set::from_raw(spec.side, pixels, labels)
    };
    let train = split(spec.per_class)?;
    let test = split(spec.test_per_class)?;
    Cifar10::new(train, test)
}

/// Random shift of up to [`MAX_SHIFT`] pixels with zero fill, then a
/// horizontal flip with probability one half, independently per image.
pub fn augment<R: Rng + ?Sized>(x: &mut Tensor4, rng: &mut R) {
    let [b, c, h, w] = x.dims();
    let max = MAX_SHIFT.min(h.saturating_sub(1)).min(w.saturating_sub(1)) as i64;
    let mut plane = vec![0.0; h * w];
    for i in 0..b {
        let dy = rng.random_range(-max..=max) as isize;
        let dx = rng.random_range(-max..=max) as isize;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let src = x.plane_mut(i, ch);
            plane.fill(0.0);
            for y in 0..h {
                let sy = y as isize - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let col = if flip { w - 1 - xx } else { xx };
                    let sx = col as isize - dx;
                    if sx >= 0 && sx < w as isize {
                        plane[y * w + xx] = src[sy as usize * w + sx as usize];
                    }
                }
            }
            src.copy_from_slice(&plane);
        }
    }
}
