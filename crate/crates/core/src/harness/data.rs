use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DatasetConfig, DatasetKind};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// Images stored as `N×C×H×W` floats with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * channels * height * width {
            return Err(Error::Dataset(format!(
                "{} pixels do not make {} images of {channels}×{height}×{width}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(Error::Dataset(format!("label {l} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut sum = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.images.chunks_exact(self.image_len()) {
            for (c, p) in img.chunks_exact(plane).enumerate() {
                for &v in p {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        (mean, std)
    }

    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) {
        let plane = self.height * self.width;
        let len = self.image_len();
        for img in self.images.chunks_exact_mut(len) {
            for (c, p) in img.chunks_exact_mut(plane).enumerate() {
                for v in p {
                    *v = ((*v as f64 - mean[c]) / std[c]) as f32;
                }
            }
        }
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images[i * len..(i + 1) * len]);
        }
        let images = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("sizes follow from the dataset");
        Batch {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches over `order`; the last one may be short.
    pub fn batches(&self, order: &[usize], batch_size: usize) -> Vec<Batch> {
        order.chunks(batch_size).map(|c| self.batch(c)).collect()
    }
}

/// Mirrors each image left to right with probability ½.
pub fn random_hflip<R: Rng>(batch: &mut Batch, rng: &mut R) {
    let shape = batch.images.shape().to_vec();
    let w = shape[3];
    let per_image = shape[1] * shape[2] * w;
    for img in batch.images.data_mut().chunks_exact_mut(per_image) {
        if rng.random_bool(0.5) {
            img.chunks_exact_mut(w).for_each(<[f32]>::reverse);
        }
    }
}

/// Sample order for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub eval: Dataset,
}

impl DataSplits {
    /// Normalizes both splits with the train split's channel statistics.
    pub fn normalized(mut self) -> Self {
        let (mean, std) = self.train.channel_stats();
        self.train.normalize(&mean, &std);
        self.eval.normalize(&mean, &std);
        self
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset("truncated IDX header".into()))
}

/// Parses an IDX image file into `(pixels, n, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!("IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Dataset(format!(
            "IDX image body has {} bytes, header promises {n}×{rows}×{cols}",
            body.len()
        )));
    }
    Ok((body.to_vec(), n, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!("IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Dataset(format!("IDX label body has {} bytes, header promises {n}", body.len())));
    }
    Ok(body.to_vec())
}

/// Splits CIFAR binary records into `(labels, pixels)`.
pub fn parse_cifar(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "CIFAR file of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

fn load_idx_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let (pixels, n, rows, cols) = parse_idx_images(&read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
    let labels = parse_idx_labels(&read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
    }
    Dataset::new(1, rows, cols, to_unit(&pixels), labels.into_iter().map(usize::from).collect())
}

fn load_cifar_files(dir: &Path, names: &[&str]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in names {
        let (l, p) = parse_cifar(&read(&dir.join(name))?)?;
        labels.extend(l.into_iter().map(usize::from));
        pixels.extend(to_unit(&p));
    }
    Dataset::new(3, 32, 32, pixels, labels)
}

/// Procedural 10-class-style images: each class is a fixed arrangement of
/// Gaussian blobs; samples jitter its position and brightness, add a random
/// distractor blob and pixel noise.
pub fn synthetic(seed: u64, train_size: usize, eval_size: usize, num_classes: usize, size: usize) -> DataSplits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let prototypes: Vec<Vec<(f32, f32, f32, f32)>> = (0..num_classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.2 * s..0.8 * s),
                        rng.random_range(0.2 * s..0.8 * s),
                        rng.random_range(0.06 * s..0.14 * s),
                        if rng.random_bool(0.75) { 1.0 } else { -1.0 },
                    )
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.35).expect("valid std");
    let sample = |rng: &mut ChaCha8Rng, n: usize| -> Dataset {
        let mut images = Vec::with_capacity(n * size * size);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..num_classes);
            let (dx, dy) = (rng.random_range(-0.12 * s..0.12 * s), rng.random_range(-0.12 * s..0.12 * s));
            let gain = rng.random_range(0.6f32..1.4);
            let mut blobs: Vec<(f32, f32, f32, f32)> = prototypes[label]
                .iter()
                .map(|&(x, y, r, a)| (x + dx, y + dy, r, a * gain))
                .collect();
            blobs.push((
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.06 * s..0.14 * s),
                rng.random_range(-1.0f32..1.0),
            ));
            for py in 0..size {
                for px in 0..size {
                    let v: f32 = blobs
                        .iter()
                        .map(|&(x, y, r, a)| {
                            let d2 = (px as f32 - x).powi(2) + (py as f32 - y).powi(2);
                            a * (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum();
                    images.push(v + noise.sample(rng));
                }
            }
            labels.push(label);
        }
        Dataset::new(1, size, size, images, labels).expect("sizes are consistent")
    };
    let train = sample(&mut rng, train_size);
    let eval = sample(&mut rng, eval_size);
    DataSplits { train, eval }
}

/// Loads and normalizes the configured dataset.
pub fn load_dataset(cfg: &DatasetConfig, run_seed: u64, num_classes: usize) -> Result<DataSplits> {
    let path = || {
        cfg.path
            .as_deref()
            .ok_or_else(|| Error::Dataset("dataset path missing".into()))
    };
    let splits = match cfg.name {
        DatasetKind::Synthetic => synthetic(cfg.seed.unwrap_or(run_seed), cfg.train_size, cfg.eval_size, num_classes, 28),
        DatasetKind::Idx => {
            let dir = path()?;
            if !dir.exists() {
                return Err(Error::Dataset(format!("{} does not exist", dir.display())));
            }
            DataSplits {
                train: load_idx_split(dir, "train")?,
                eval: load_idx_split(dir, "t10k")?,
            }
        }
        DatasetKind::Cifar => {
            let dir = path()?;
            if !dir.exists() {
                return Err(Error::Dataset(format!("{} does not exist", dir.display())));
            }
            let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
            let train: Vec<&str> = train.iter().map(String::as_str).collect();
            DataSplits {
                train: load_cifar_files(dir, &train)?,
                eval: load_cifar_files(dir, &["test_batch.bin"])?,
            }
        }
    };
    splits.train.check_labels(num_classes)?;
    splits.eval.check_labels(num_classes)?;
    if splits.train.is_empty() || splits.eval.is_empty() {
        return Err(Error::Dataset("empty train or eval split".into()));
    }
    Ok(splits.normalized())
}
