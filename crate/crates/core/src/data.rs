//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), normalization and the
//! search-time data split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    MnistIdx,
    Cifar10Bin,
}

/// Raw `u8` images (`N×C×H×W`) with labels; normalized on batch extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    shape: [usize; 4],
    labels: Vec<u8>,
    num_classes: usize,
}

/// Maps a pixel from `0..=255` onto `[-1, 1]`.
pub fn normalize(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

impl Dataset {
    pub fn new(images: Vec<u8>, shape: [usize; 4], labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if shape.iter().product::<usize>() != images.len() {
            return Err(Error::dim(format!("{} pixels for shape {shape:?}", images.len())));
        }
        if labels.len() != shape[0] {
            return Err(Error::dim(format!("{} labels for {} images", labels.len(), shape[0])));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::usage(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset { images, shape, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.images[i * per..(i + 1) * per]
    }

    /// Normalized images and labels for the given sample indices.
    pub fn batch<F: Real>(&self, idx: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let [_, c, h, w] = self.shape;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&p| F::from_f64_lossy(normalize(p) as f64)));
        }
        let labels = idx.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::new([idx.len(), c, h, w], data).expect("batch shape"), labels)
    }

    /// The first `n` samples (or all when `n` is zero or too large).
    pub fn truncate(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let mut shape = self.shape;
        shape[0] = n;
        Dataset { images: self.images[..n * per].to_vec(), shape, labels: self.labels[..n].to_vec(), num_classes: self.num_classes }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::at_offset(at as u64, "file ends inside the header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::at_offset(0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let (n, h, w) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        let whole = payload.len() / (h * w).max(1);
        return Err(Error::at_offset(
            (16 + payload.len()) as u64,
            format!("truncated: header declares {n} images of {h}x{w}, payload holds {whole}"),
        ));
    }
    Ok((n, h, w, payload[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], num_classes: usize) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::at_offset(0, format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::at_offset(bytes.len() as u64, format!("truncated: header declares {n} labels, payload holds {}", payload.len())));
    }
    if let Some(i) = payload[..n].iter().position(|&l| l as usize >= num_classes) {
        return Err(Error::at_offset((8 + i) as u64, format!("label {} out of range", payload[i])));
    }
    Ok(payload[..n].to_vec())
}

/// Parses concatenated CIFAR-10 records (1 label byte + 3072 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::at_offset(
            (whole * CIFAR_RECORD) as u64,
            format!("truncated record: {} trailing bytes", bytes.len() - whole * CIFAR_RECORD),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::at_offset((r * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Dataset::new(images, [n, 3, 32, 32], labels, 10)
}

pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?, 10)?;
    if labels.len() != n {
        return Err(Error::at_offset(4, format!("{} labels for {n} images", labels.len())));
    }
    Dataset::new(pixels, [n, 1, h, w], labels, 10)
}

fn cifar_files(dir: &Path, split: &str) -> Vec<PathBuf> {
    match split {
        "train" => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        _ => vec![dir.join("test_batch.bin")],
    }
}

/// Loads split `train` or `test` from a dataset directory. MNIST expects
/// `train-*` / `t10k-*` IDX files; CIFAR-10 the `data_batch_*.bin` /
/// `test_batch.bin` files. A CIFAR path naming a file is read directly.
pub fn load_dataset(path: &Path, format: DataFormat, split: &str) -> Result<Dataset> {
    match format {
        DataFormat::MnistIdx => {
            let prefix = if split == "train" { "train" } else { "t10k" };
            load_mnist(
                &path.join(format!("{prefix}-images-idx3-ubyte")),
                &path.join(format!("{prefix}-labels-idx1-ubyte")),
            )
        }
        DataFormat::Cifar10Bin => {
            if path.is_file() {
                return parse_cifar10(&fs::read(path)?);
            }
            let mut bytes = Vec::new();
            for f in cifar_files(path, split) {
                bytes.extend(fs::read(&f)?);
            }
            parse_cifar10(&bytes)
        }
    }
}

/// Disjoint index sets used during search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Network weights are trained on this half.
    pub weight_half: Vec<usize>,
    /// Architecture parameters are trained on this half.
    pub alpha_half: Vec<usize>,
    /// Held out for scoring sampled subnets.
    pub reduction_val: Vec<usize>,
}

impl SplitPlan {
    pub fn new<R: Rng + ?Sized>(n: usize, validation_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::config(format!("validation fraction {validation_fraction} outside [0, 1)")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let n_val = (n as f64 * validation_fraction).round() as usize;
        let rest = perm.split_off(n_val);
        let half = rest.len().div_ceil(2);
        let plan = SplitPlan { reduction_val: perm, weight_half: rest[..half].to_vec(), alpha_half: rest[half..].to_vec() };
        if plan.weight_half.is_empty() || plan.alpha_half.is_empty() || plan.reduction_val.is_empty() {
            return Err(Error::config(format!("{n} samples are too few to split")));
        }
        Ok(plan)
    }
}
