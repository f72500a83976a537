//! Datasets, file loaders and deterministic batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::integration::mix_seed;
use crate::numerics::Tensor;

/// Images `[N, C, H, W]` with one label per item.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

/// A mini-batch drawn from a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false: construction rejects empty datasets.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-item shape `[C, H, W]`.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.classes)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.subset(indices)?;
        Ok(Batch {
            images: d.images,
            labels: d.labels,
        })
    }

    /// The first `count` items.
    pub fn head(&self, count: usize) -> Result<Self> {
        self.subset(&(0..count.min(self.len())).collect::<Vec<_>>())
    }

    /// A seeded random subset of `ceil(fraction * len)` items, at least one.
    pub fn sample_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let count = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(count);
        order.sort_unstable();
        self.subset(&order)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file, returning its dimensions and payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] as usize != rank {
        return Err(Error::format(
            path,
            format!("bad magic {:02x?}, expected ubyte rank-{rank} IDX", &bytes[..4]),
        ));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header promises {expected}", payload.len()),
        ));
    }
    if dims[0] == 0 {
        return Err(Error::format(path, "no items"));
    }
    Ok((dims, payload))
}

/// Loads an IDX image file (rank 3) and label file (rank 1). Gzip input is
/// detected and decompressed. Pixels are scaled by `1/255`; the class count
/// is `max(label) + 1`, at least 2.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_maybe_gz(images_path)?;
    let label_bytes = read_maybe_gz(labels_path)?;
    let (dims, pixels) = parse_idx(images_path, &image_bytes, 3)?;
    let (ldims, labels) = parse_idx(labels_path, &label_bytes, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(images, labels, classes)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::invalid("no CIFAR batch files given"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
            ));
        }
        for record in bytes.chunks(CIFAR_RECORD) {
            if record[0] >= 10 {
                return Err(Error::format(path, format!("label byte {} outside 0..10", record[0])));
            }
            labels.push(record[0] as usize);
            data.extend(record[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data)?;
    Dataset::new(images, labels, 10)
}

/// Isotropic Gaussian blobs with unit spread around centers drawn with
/// per-coordinate standard deviation 10. Items are `[1, 1, dim]`, ordered
/// class by class.
pub fn synthetic_blobs(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::invalid("synthetic_blobs needs classes >= 2, per_class >= 1, dim >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Normal::new(0.0, 10.0).expect("valid");
    let noise = Normal::new(0.0, 1.0).expect("valid");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| center.sample(&mut rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(c.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![labels.len(), 1, 1, dim], data)?;
    Dataset::new(images, labels, classes)
}

/// Seeded per-epoch shuffling into batches; the last partial batch is kept.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if len == 0 {
            return Err(Error::invalid("cannot batch an empty dataset"));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    /// Index batches for one epoch.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch as u64)));
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

pub fn batch_iterator(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<BatchIterator> {
    BatchIterator::new(dataset.len(), batch_size, shuffle_seed)
}
