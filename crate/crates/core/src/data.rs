//! Datasets: MNIST IDX and CIFAR-10 binary readers, a seeded
//! train/validation split, the fixed crop-and-flip baseline augmentation,
//! minibatch iteration and a synthetic Gaussian-blob dataset for tests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `(N, C, H, W)` in `[0, 1]`, stored row-major, with labels in
/// `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `(C, H, W)`.
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, shape: [usize; 3], num_classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            shape,
            num_classes,
            images,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let per = self.image_len();
        if per == 0 || self.images.len() != self.labels.len() * per {
            return Err(Error::InvalidInput(format!(
                "{} pixel values do not make {} images of shape {:?}",
                self.images.len(),
                self.labels.len(),
                self.shape
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidInput(format!("label {l} out of range for {} classes", self.num_classes)));
        }
        if self.images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("pixel values outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// The images at `indices` as a `(len, C, H, W)` tensor.
    pub fn images_at(&self, indices: &[usize]) -> Tensor {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.shape;
        Tensor::new(&[indices.len(), c, h, w], data).expect("sizes agree")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            shape: self.shape,
            num_classes: self.num_classes,
            images: self.images_at(indices).to_vec(),
            labels: self.labels_at(indices),
        }
    }

    /// The first `n` examples (or all of them).
    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn format_err(what: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        what,
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(what, bytes.len(), "file ends inside the header"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels in [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    const WHAT: &str = "IDX image file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(WHAT, 0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")));
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(
            WHAT,
            bytes.len(),
            format!("truncated: header announces {n} images of {rows}×{cols} ({need} bytes), found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(format_err(WHAT, 16 + need, format!("{} unexpected trailing bytes", body.len() - need)));
    }
    Ok((n, rows, cols, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    const WHAT: &str = "IDX label file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(WHAT, 0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")));
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(
            WHAT,
            8 + body.len().min(n),
            format!("header announces {n} labels, found {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an MNIST-style image/label IDX pair (ten classes).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images)?).map_err(|e| e.context(images.display().to_string()))?;
    let labels_v = parse_idx_labels(&read(labels)?).map_err(|e| e.context(labels.display().to_string()))?;
    if labels_v.len() != n {
        return Err(Error::InvalidInput(format!("{n} images but {} labels", labels_v.len())));
    }
    Dataset::new("mnist", [1, rows, cols], 10, pixels, labels_v)
}

/// Loads `train-*` or `t10k-*` IDX files from a directory.
pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Parses concatenated CIFAR-10 binary records: one label byte followed by
/// the red, green and blue 32×32 planes.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    const WHAT: &str = "CIFAR-10 binary";
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(format_err(
            WHAT,
            whole,
            format!("size {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(WHAT, r * CIFAR_RECORD, format!("label {} out of range", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        images.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((images, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (i, l) = parse_cifar10_binary(&read(p)?).map_err(|e| e.context(p.display().to_string()))?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::new("cifar10", [3, 32, 32], 10, images, labels)
}

/// Loads `data_batch_{1..5}.bin` or `test_batch.bin` from a directory.
pub fn load_cifar10_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let files: Vec<PathBuf> = if train {
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![dir.join("test_batch.bin")]
    };
    load_cifar10_binary(&files)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            validation_fraction: 0.10,
            split_seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("data.validation_fraction", format!("must lie in (0, 1), got {f}")));
        }
        Ok(())
    }
}

/// Seeded shuffle, then the first `round(N · fraction)` examples become the
/// validation set and the rest the training set.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let (train, val) = split_indices(dataset.len(), spec);
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput(format!(
            "splitting {} examples at {} leaves an empty side",
            dataset.len(),
            spec.validation_fraction
        )));
    }
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// Index form of [`split`]: `(train, validation)`.
pub fn split_indices(n: usize, spec: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.split_seed));
    let n_val = (n as f64 * spec.validation_fraction).round() as usize;
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Which fixed augmentations suit a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Digits: crop only, since mirrored digits are different symbols.
    Digits,
    /// Natural images: crop and horizontal flip.
    Natural,
}

/// Zero-pads each image by `pad` pixels and crops back to the original size
/// at a random offset.
pub fn random_crop(x: &Tensor, pad: usize, rng: &mut impl Rng) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for img in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[base + y * w + xx] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Mirrors each image horizontally with probability one half.
pub fn random_flip(x: &Tensor, rng: &mut impl Rng) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = x.to_vec();
    for img in 0..n {
        if rng.gen_bool(0.5) {
            for row in out[img * c * h * w..(img + 1) * c * h * w].chunks_mut(w) {
                row.reverse();
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// The fixed, non-learnable augmentation applied before the policy: pad-4
/// random crop, plus a random horizontal flip for natural images. The
/// result is a constant (never on a tape).
pub fn baseline_augment(x: &Tensor, kind: DatasetKind, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cropped = random_crop(&x.detach(), 4, &mut rng);
    match kind {
        DatasetKind::Digits => cropped,
        DatasetKind::Natural => random_flip(&cropped, &mut rng),
    }
}

/// `n` Gaussian-blob images on 1×16×16 canvases. Class `k` places its blob
/// at angle `2πk / classes` on a circle around the centre, with jittered
/// position and additive pixel noise.
pub fn synth_dataset(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    const SIDE: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.6).expect("valid normal");
    let pixel_noise = Normal::new(0.0, 0.05).expect("valid normal");
    let centre = (SIDE as f64 - 1.0) / 2.0;
    let (radius, sigma) = (4.5, 1.8);
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let angle = std::f64::consts::TAU * k as f64 / classes as f64;
        let cx = centre + radius * angle.cos() + jitter.sample(&mut rng);
        let cy = centre + radius * angle.sin() + jitter.sample(&mut rng);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp() + pixel_noise.sample(&mut rng);
                images.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(k);
    }
    Dataset::new("synth", [1, SIDE, SIDE], classes, images, labels)
}

/// Shuffled minibatch indices for one pass over `n` examples. The final
/// partial batch is kept unless `drop_last`.
pub fn epoch_batches(n: usize, batch_size: usize, drop_last: bool, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if drop_last && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    batches
}

/// Endless cyclic minibatches in a fixed order, used for validation batches.
#[derive(Clone, Debug)]
pub struct CyclicBatches {
    n: usize,
    batch_size: usize,
    pos: usize,
}

impl CyclicBatches {
    pub fn new(n: usize, batch_size: usize) -> Self {
        Self {
            n,
            batch_size: batch_size.max(1).min(n.max(1)),
            pos: 0,
        }
    }
}

impl Iterator for CyclicBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.n == 0 {
            return None;
        }
        let batch = (0..self.batch_size).map(|i| (self.pos + i) % self.n).collect();
        self.pos = (self.pos + self.batch_size) % self.n;
        Some(batch)
    }
}
