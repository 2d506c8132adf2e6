//! Synthetic and CIFAR-binary classification datasets plus a deterministic
//! batch loader.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result, UniKdError};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const BLOBS_PER_CLASS: usize = 3;
const CROP_PADDING: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    CifarBinary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub class_count: usize,
    /// Image side length; CIFAR requires 32.
    pub input_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
    /// Std-dev of the per-pixel Gaussian noise added to synthetic templates.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Largest random translation, in pixels, applied to synthetic templates.
    #[serde(default)]
    pub max_shift: usize,
    /// Per-channel normalization; computed from the train split when absent.
    #[serde(default)]
    pub mean: Option<[f64; 3]>,
    #[serde(default)]
    pub std: Option<[f64; 3]>,
    /// Read 3073-byte CIFAR-10 records instead of 3074-byte CIFAR-100 ones.
    #[serde(default)]
    pub cifar10: bool,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub val_path: Option<PathBuf>,
}

fn default_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn synthetic(class_count: usize, input_size: usize, train_size: usize, val_size: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            class_count,
            input_size,
            train_size,
            val_size,
            seed,
            noise: default_noise(),
            max_shift: 0,
            mean: None,
            std: None,
            cifar10: false,
            train_path: None,
            val_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(UniKdError::Config(m));
        if self.class_count < 2 {
            return cfg(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.kind == DatasetKind::Synthetic && (self.train_size == 0 || self.val_size == 0) {
            return cfg("train_size and val_size must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return cfg(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if let Some(std) = self.std {
            if std.iter().any(|s| !(*s > 0.0)) {
                return cfg("normalization std must be positive".into());
            }
        }
        if self.kind == DatasetKind::CifarBinary && self.input_size != CIFAR_SIDE {
            return cfg(format!("cifar-binary data is {CIFAR_SIDE}x{CIFAR_SIDE}, input_size is {}", self.input_size));
        }
        Ok(())
    }
}

/// One batch of images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        ensure!(images.shape().len() == 4 && images.shape()[1] == 3, "images must be (B, 3, H, W)");
        ensure!(images.shape()[0] == labels.len(), "{} images but {} labels", images.shape()[0], labels.len());
        if let Some(l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(UniKdError::contract(format!("label {l} out of range for {class_count} classes")));
        }
        Ok(LabeledBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// In-memory image set, `(N, 3, S, S)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    side: usize,
    class_count: usize,
    augment: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = 3 * self.side * self.side;
        &self.images[i * n..(i + 1) * n]
    }

    /// Whether loaders apply crop/flip augmentation to this split.
    pub fn augments(&self) -> bool {
        self.augment
    }

    pub fn with_augmentation(mut self, on: bool) -> Self {
        self.augment = on;
        self
    }

    pub fn gather(&self, indices: &[usize]) -> LabeledBatch {
        let n = 3 * self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        LabeledBatch {
            images: Tensor::from_vec(&[indices.len(), 3, self.side, self.side], data).expect("gather shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-channel mean and standard deviation over the whole split.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let hw = self.side * self.side;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for i in 0..self.len() {
            for (c, plane) in self.image(i).chunks(hw).enumerate() {
                for &v in plane {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (self.len() * hw).max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
        (mean, std)
    }
}

/// Per-channel affine normalization applied before the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Uses the spec's constants, or the train split's statistics when absent.
    pub fn resolve(spec: &DatasetSpec, train: &Dataset) -> Self {
        let (m, s) = train.channel_stats();
        Normalization { mean: spec.mean.unwrap_or(m), std: spec.std.unwrap_or(s) }
    }

    pub fn apply(&self, images: &Tensor) -> Tensor {
        let (_, c, h, w) = images.dims4();
        let hw = h * w;
        let mut out = images.clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = p % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_sigma_sq: f64,
    amp: [f64; 3],
}

fn class_templates(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let s = spec.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.class_count)
        .map(|_| {
            let blobs: Vec<Blob> = (0..BLOBS_PER_CLASS)
                .map(|_| {
                    let sigma = rng.random_range(s as f64 / 8.0..=s as f64 / 3.0);
                    Blob {
                        cx: rng.random_range(0.0..s as f64),
                        cy: rng.random_range(0.0..s as f64),
                        inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
                        amp: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    }
                })
                .collect();
            let mut t = vec![0.5; 3 * s * s];
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let mut v = 0.0;
                        for b in &blobs {
                            let d2 = (x as f64 - b.cx).powi(2) + (y as f64 - b.cy).powi(2);
                            v += b.amp[c] * (-d2 * b.inv_two_sigma_sq).exp();
                        }
                        t[(c * s + y) * s + x] = (0.5 + 0.4 * v).clamp(0.0, 1.0);
                    }
                }
            }
            t
        })
        .collect()
}

fn synth_split(spec: &DatasetSpec, templates: &[Vec<f64>], n: usize, stream: u64) -> Dataset {
    let s = spec.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut images = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let shift = spec.max_shift as i64;
    for i in 0..n {
        let label = i % spec.class_count;
        let t = &templates[label];
        let (dx, dy) = if shift > 0 {
            (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift))
        } else {
            (0, 0)
        };
        for c in 0..3 {
            for y in 0..s {
                let sy = (y as isize - dy as isize).clamp(0, s as isize - 1) as usize;
                for x in 0..s {
                    let sx = (x as isize - dx as isize).clamp(0, s as isize - 1) as usize;
                    let mut v = t[(c * s + sy) * s + sx];
                    if spec.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += spec.noise * z;
                    }
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset { images, labels, side: s, class_count: spec.class_count, augment: false }
}

/// Train and validation splits of class-conditioned blob images. Labels are
/// assigned round-robin; everything is a function of `spec.seed`.
pub fn synth_generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    ensure!(spec.kind == DatasetKind::Synthetic, "synth_generate needs a synthetic dataset spec");
    let templates = class_templates(spec);
    Ok((
        synth_split(spec, &templates, spec.train_size, 1),
        synth_split(spec, &templates, spec.val_size, 2),
    ))
}

/// Parses CIFAR binary records: `[coarse, fine, 3072 pixels]` for CIFAR-100
/// (fine label used) or `[label, 3072 pixels]` with `spec.cifar10`. Pixels
/// are planar R, G, B, each 32×32 row-major, scaled to `[0, 1]`.
pub fn cifar_load(path: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    cifar_parse(&bytes, spec)
}

pub fn cifar_parse(bytes: &[u8], spec: &DatasetSpec) -> Result<Dataset> {
    let label_bytes = if spec.cifar10 { 1 } else { 2 };
    let record = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        return Err(UniKdError::Format(format!(
            "file length {} is not a multiple of the {record}-byte record size (expected {} bytes for {} records)",
            bytes.len(),
            bytes.len() / record * record,
            bytes.len() / record
        )));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= spec.class_count {
            return Err(UniKdError::Format(format!(
                "record {i}: label {label} >= class count {}",
                spec.class_count
            )));
        }
        labels.push(label);
        images.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset { images, labels, side: CIFAR_SIDE, class_count: spec.class_count, augment: true })
}

/// Inverse of [`cifar_parse`]. With `coarse` the CIFAR-100 layout is written
/// (one coarse label per record); without it, the CIFAR-10 layout.
pub fn cifar_encode(dataset: &Dataset, coarse: Option<&[u8]>) -> Result<Vec<u8>> {
    ensure!(dataset.side == CIFAR_SIDE, "cifar records are {CIFAR_SIDE}x{CIFAR_SIDE}, dataset is {}", dataset.side);
    if let Some(c) = coarse {
        ensure!(c.len() == dataset.len(), "{} coarse labels for {} records", c.len(), dataset.len());
    }
    let mut out = Vec::with_capacity(dataset.len() * (2 + CIFAR_PIXELS));
    for i in 0..dataset.len() {
        ensure!(dataset.labels[i] <= u8::MAX as usize, "record {i}: label {} does not fit a byte", dataset.labels[i]);
        if let Some(c) = coarse {
            out.push(c[i]);
        }
        out.push(dataset.labels[i] as u8);
        for &v in dataset.image(i) {
            ensure!((0.0..=1.0).contains(&v), "record {i}: pixel {v} outside [0, 1]");
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Loads `(train, val)` for any dataset kind.
pub fn load_splits(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec.kind {
        DatasetKind::Synthetic => synth_generate(spec),
        DatasetKind::CifarBinary => {
            spec.validate()?;
            let path = |p: &Option<PathBuf>, which: &str| {
                p.clone()
                    .ok_or_else(|| UniKdError::Config(format!("cifar-binary dataset needs dataset.{which}_path")))
            };
            let train = cifar_load(&path(&spec.train_path, "train")?, spec)?;
            let val = cifar_load(&path(&spec.val_path, "val")?, spec)?.with_augmentation(false);
            Ok((train, val))
        }
    }
}

/// Deterministic mini-batch source. The order of epoch `e` depends only on
/// `(seed, e)`.
#[derive(Debug, Clone)]
pub struct BatchLoader<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
}

pub fn make_loader(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<BatchLoader<'_>> {
    ensure!(batch_size >= 1, "batch_size must be at least 1");
    Ok(BatchLoader { dataset, batch_size, seed, shuffle })
}

impl<'a> BatchLoader<'a> {
    pub fn num_batches(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> EpochBatches<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        if self.shuffle {
            order.shuffle(&mut rng);
        }
        EpochBatches { dataset: self.dataset, order, pos: 0, batch_size: self.batch_size, rng }
    }
}

pub struct EpochBatches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Iterator for EpochBatches<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let mut batch = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        if self.dataset.augments() {
            augment(&mut batch.images, &mut self.rng);
        }
        Some(batch)
    }
}

/// Random crop with zero padding plus horizontal flip, per image.
fn augment(images: &mut Tensor, rng: &mut ChaCha8Rng) {
    let (b, c, h, w) = images.dims4();
    let pad = CROP_PADDING as i64;
    let per = c * h * w;
    for i in 0..b {
        let dy = rng.random_range(-pad..=pad);
        let dx = rng.random_range(-pad..=pad);
        let flip = rng.random_bool(0.5);
        let src = images.data()[i * per..(i + 1) * per].to_vec();
        let dst = &mut images.data_mut()[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sy = y as isize + dy as isize;
                    let sx = sx0 as isize + dx as isize;
                    dst[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}
