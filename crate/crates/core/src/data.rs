//! Image datasets: IDX ingestion, synthetic generation, normalization,
//! augmentation and seeded batching.
//!
//! Shuffling and augmentation draw from `Pcg64` (PCG XSL RR 128/64) seeded
//! through [`stream_seed`], so every epoch's order and crops can be
//! regenerated from `(seed, epoch)` alone.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel statistics (a single entry for single-channel data).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Statistics applied to `images`, if normalized.
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::invalid("dataset", format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch { images: images.shape()[0], labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::range("dataset", format!("label {bad} not in 0..{num_classes}")));
        }
        Ok(Dataset { images, labels, num_classes, split, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let [c, h, w] = self.image_dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.outer(i));
        }
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            images: b.images,
            labels: b.labels,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Applies precomputed statistics (typically fitted on the train split).
    pub fn normalized(mut self, stats: &Normalization) -> Dataset {
        let [c, h, w] = self.image_dims();
        let plane = h * w;
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = if stats.mean.len() == 1 { 0 } else { (i / plane) % c };
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
        self.normalization = Some(stats.clone());
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

impl Normalization {
    /// Mean and population standard deviation over all pixels; per channel for multi-channel data.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let [c, h, w] = dataset.image_dims();
        let plane = h * w;
        let groups = if c == 1 { 1 } else { c };
        let mut sum = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        let data = dataset.images.data();
        let channel = |i: usize| if groups == 1 { 0 } else { (i / plane) % c };
        for (i, &v) in data.iter().enumerate() {
            sum[channel(i)] += v;
            count[channel(i)] += 1;
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; groups];
        for (i, &v) in data.iter().enumerate() {
            let d = v - mean[channel(i)];
            sq[channel(i)] += d * d;
        }
        let std: Vec<f64> = sq.iter().zip(&count).map(|(s, &n)| (s / n as f64).sqrt()).collect();
        if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::ZeroVariance);
        }
        Ok(Normalization { mean, std })
    }
}

/// Fits statistics on `train` and applies the same statistics to `test`.
pub fn normalize(train: Dataset, test: Option<Dataset>) -> Result<(Dataset, Option<Dataset>, Normalization)> {
    let stats = Normalization::fit(&train)?;
    let train = train.normalized(&stats);
    let test = test.map(|t| t.normalized(&stats));
    Ok((train, test, stats))
}

fn read_u32_be(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn check_header(bytes: &[u8], path: &Path, magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.display().to_string(), expected: header_len, found: bytes.len() });
    }
    let found = read_u32_be(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic { path: path.display().to_string(), expected: magic, found });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated { path: path.display().to_string(), expected: header_len, found: bytes.len() });
    }
    Ok(())
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    check_header(&bytes, path, IDX_IMAGES_MAGIC, 16)?;
    let n = read_u32_be(&bytes, 4) as usize;
    let rows = read_u32_be(&bytes, 8) as usize;
    let cols = read_u32_be(&bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.display().to_string(), expected, found: bytes.len() });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    check_header(&bytes, path, IDX_LABELS_MAGIC, 8)?;
    let n = read_u32_be(&bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.display().to_string(), expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
/// `num_classes` defaults to `max(label) + 1`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if n != labels.len() {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(images, labels, classes, split)
}

/// One Gaussian blob per class at a class-specific position with a
/// class-specific peak intensity, plus pixel noise. Labels cycle through the
/// classes so that consecutive samples differ in class.
pub fn synthetic_gaussians(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 || image_size == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let s = image_size as f64;
    let sigma = (s / 6.0).max(0.75);
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let angle = std::f64::consts::TAU * class as f64 / num_classes as f64;
        let radius = if num_classes == 1 { 0.0 } else { s / 4.0 };
        let cy = (s - 1.0) / 2.0 + radius * angle.sin();
        let cx = (s - 1.0) / 2.0 + radius * angle.cos();
        let peak = 0.4 + 0.6 * (class + 1) as f64 / num_classes as f64;
        let jy: f64 = rng.random_range(-0.5..0.5);
        let jx: f64 = rng.random_range(-0.5..0.5);
        for y in 0..image_size {
            for x in 0..image_size {
                let d2 = (y as f64 - cy - jy).powi(2) + (x as f64 - cx - jx).powi(2);
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.03;
                data.push((peak * (-d2 / (2.0 * sigma * sigma)).exp() + noise).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, image_size, image_size], data)?;
    Dataset::new(images, labels, num_classes, split)
}

/// Derives an independent generator seed for `(seed, epoch, stream)`.
pub fn stream_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order for one pass: identity, or a seeded Fisher-Yates shuffle.
pub fn epoch_order(len: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut Pcg64::seed_from_u64(seed));
    }
    order
}

/// Consecutive batches over [`epoch_order`]; the last batch may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch_size must be positive");
    let order = epoch_order(dataset.len(), shuffle, seed);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| dataset.batch(&idx))
}

/// Random pad-and-crop plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub pad: usize,
    pub flip_prob: f64,
    /// Value of the padded border.
    pub fill: f64,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        self.pad == 0 && self.flip_prob == 0.0
    }

    /// Draws, per image and in order, a row offset, a column offset (each
    /// uniform in `0..=2*pad`) and a flip decision.
    pub fn apply<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Batch {
        let s = batch.images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let pad = self.pad as isize;
        let mut out = Vec::with_capacity(batch.images.numel());
        for i in 0..n {
            let dy = rng.random_range(0..=2 * self.pad) as isize;
            let dx = rng.random_range(0..=2 * self.pad) as isize;
            let flip = rng.random::<f64>() < self.flip_prob;
            let img = batch.images.outer(i);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { (w - 1 - x) as isize } else { x as isize };
                        let (iy, ix) = (y as isize + dy - pad, sx + dx - pad);
                        let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            self.fill
                        } else {
                            img[(ch * h + iy as usize) * w + ix as usize]
                        };
                        out.push(v);
                    }
                }
            }
        }
        Batch { images: Tensor::new(s.to_vec(), out).expect("same shape"), labels: batch.labels.clone() }
    }
}

/// Convenience wrapper over [`Augment::apply`] with a zero border.
pub fn augment<R: Rng + ?Sized>(batch: &Batch, pad: usize, flip_prob: f64, rng: &mut R) -> Batch {
    Augment { pad, flip_prob, fill: 0.0 }.apply(batch, rng)
}
