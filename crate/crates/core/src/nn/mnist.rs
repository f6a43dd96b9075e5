//! IDX-format MNIST files, optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::substream;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum MnistError {
    #[error("dataset file not found: {0} (or .gz)")]
    Missing(PathBuf),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("label {0} outside 0..=9")]
    BadLabel(u8),
    #[error("{0}")]
    Inconsistent(String),
}

/// Row-major 8-bit images with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// `n` samples drawn without replacement, in drawn order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset, MnistError> {
        if n > self.len() {
            return Err(MnistError::Inconsistent(format!("subset of {n} from {} samples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut substream(seed, 0x5ab5e7));
        idx.truncate(n);
        Ok(self.select(&idx))
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.pixels());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset { rows: self.rows, cols: self.cols, images, labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, MnistError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| MnistError::TruncatedFile(format!("{what} header")))
}

/// `(count, rows, cols, pixels)` from an `idx3-ubyte` image file.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), MnistError> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IMAGE_MAGIC {
        return Err(MnistError::BadMagic { expected: IMAGE_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(MnistError::TruncatedFile(format!("{} of {need} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, MnistError> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != LABEL_MAGIC {
        return Err(MnistError::BadMagic { expected: LABEL_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(MnistError::TruncatedFile(format!("{} of {n} label bytes", body.len())));
    }
    if let Some(&bad) = body[..n].iter().find(|&&l| l > 9) {
        return Err(MnistError::BadLabel(bad));
    }
    Ok(body[..n].to_vec())
}

/// Reads `path`, falling back to `path.gz`; `.gz` files are decompressed.
pub fn read_idx_file(path: &Path) -> Result<Vec<u8>, MnistError> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let chosen = if path.exists() {
        path.to_path_buf()
    } else if gz.exists() {
        gz
    } else {
        return Err(MnistError::Missing(path.to_path_buf()));
    };
    let io = |source| MnistError::Io { path: chosen.clone(), source };
    let raw = fs::read(&chosen).map_err(io)?;
    if chosen.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_pair(images: &Path, labels: &Path) -> Result<Dataset, MnistError> {
    let (n, rows, cols, pixels) = parse_images(&read_idx_file(images)?)?;
    let labels = parse_labels(&read_idx_file(labels)?)?;
    if labels.len() != n {
        return Err(MnistError::Inconsistent(format!("{n} images but {} labels", labels.len())));
    }
    Ok(Dataset { rows, cols, images: pixels, labels })
}

/// `(train, test)` from the standard file names under `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), MnistError> {
    let train = load_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}
