//! MNIST-style IDX ingestion, normalization and train/validation splitting.
//!
//! IDX layout: a big-endian `u32` magic (`0x00000803` for images,
//! `0x00000801` for labels), one big-endian `u32` per dimension, then the
//! row-major unsigned-byte payload. Gzip-compressed files are accepted.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, PathContext, Result};
use crate::real::Real;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Raw image tensor: `count` images of `rows x cols` bytes in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

/// Normalized images (one flattened row per sample) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet<T = f64> {
    pub images: Array2<T>,
    pub labels: Vec<u8>,
    pub name: String,
}

impl<T: Real> ImageSet<T> {
    pub fn new(images: Array2<T>, labels: Vec<u8>, name: impl Into<String>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::arg(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: name.into(),
        }
    }

    /// The first `n` samples (or all if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).at(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).at(path)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Length {
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic is {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic is {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..].to_vec();
    if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
        return Err(Error::Data(format!("label {bad} at index {i} outside 0..{NUM_CLASSES}")));
    }
    Ok(labels)
}

pub fn encode_idx_images(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages> {
    parse_idx_images(&read_maybe_gzip(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gzip(path.as_ref())?)
}

/// Flattens each image row-major and maps byte `b` to `b / 255`.
pub fn normalize_flatten<T: Real>(raw: &RawImages) -> Array2<T> {
    let width = raw.rows * raw.cols;
    let scale = T::of(255.0);
    let table: Vec<T> = (0..=255u32).map(|b| T::of(b as f64) / scale).collect();
    Array2::from_shape_fn((raw.count, width), |(i, j)| table[raw.pixels[i * width + j] as usize])
}

/// Loads an image/label file pair into a normalized [`ImageSet`].
pub fn load_image_set<T: Real>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    name: impl Into<String>,
) -> Result<ImageSet<T>> {
    let raw = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if raw.count != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            raw.count,
            labels.len()
        )));
    }
    ImageSet::new(normalize_flatten(&raw), labels, name)
}

/// Seeded shuffled split; the validation part holds `round(val_fraction * n)` samples.
pub fn split_train_val<T: Real>(
    set: &ImageSet<T>,
    val_fraction: f64,
    seed: u64,
) -> Result<(ImageSet<T>, ImageSet<T>)> {
    let (train_idx, val_idx) = split_indices(set.len(), val_fraction, seed)?;
    Ok((
        set.subset(&train_idx, format!("{}-train", set.name)),
        set.subset(&val_idx, format!("{}-val", set.name)),
    ))
}

/// Index form of [`split_train_val`]: `(train, validation)`, each sorted ascending.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::arg(format!("validation fraction {val_fraction} not in [0, 1)")));
    }
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    debug_assert!({
        let v: HashSet<_> = val.iter().collect();
        train.iter().all(|i| !v.contains(i))
    });
    Ok((train, val))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Errors with [`Error::Checksum`] unless the file's SHA-256 matches `expected` (hex).
pub fn verify_sha256(path: impl AsRef<Path>, expected: &str) -> Result<()> {
    let path = path.as_ref();
    let found = sha256_file(path)?;
    if found.eq_ignore_ascii_case(expected.trim()) {
        Ok(())
    } else {
        Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        })
    }
}
