//! Datasets: a seeded Gaussian-cluster generator and loaders for the IDX
//! and CIFAR binary formats.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_CLASSES: usize = 10;
pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Geometry of image rows, laid out `C×H×W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    pub split: Split,
    pub image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        inputs.require_matrix("Dataset::new")?;
        if inputs.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            }
            .into());
        }
        let class_index = build_class_index(&labels, num_classes)?;
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            class_index,
            split,
            image: None,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Example ids grouped by class.
    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    /// Inputs and labels for the given example ids.
    pub fn batch(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.gather_rows(ids), ids.iter().map(|&i| self.labels[i]).collect())
    }

    /// SHA-256 over shape, class count, input bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.inputs.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for v in self.inputs.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Ids per class, in ascending id order.
pub fn build_class_index(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut index = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::LabelRange {
                index: i,
                label: y,
                classes: num_classes,
            });
        }
        index[y].push(i);
    }
    Ok(index)
}

/// Isotropic Gaussian clusters around standard-normal centers.
///
/// Train and test each hold `per_class` samples per class, drawn
/// independently from the same class distributions.
pub fn synth_clusters(k_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if k_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::config("synthetic dataset counts must be positive"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::config(format!("spread must be > 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let centers: Vec<Vec<f64>> = (0..k_classes).map(|_| (0..dim).map(|_| normal()).collect()).collect();
    let mut draw = |split| {
        let mut data = Vec::with_capacity(k_classes * per_class * dim);
        let mut labels = Vec::with_capacity(k_classes * per_class);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(center.iter().map(|&m| m + spread * normal()));
                labels.push(c);
            }
        }
        Dataset::new(Tensor::matrix(labels.len(), dim, data)?, labels, k_classes, split)
    };
    let train = draw(Split::Train)?;
    let test = draw(Split::Test)?;
    Ok((train, test))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    check_len(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read(images_path)?;
    let labels = read(labels_path)?;
    idx_from_bytes(&images, images_path, &labels, labels_path)
}

pub fn idx_from_bytes(images: &[u8], images_path: &Path, labels: &[u8], labels_path: &Path) -> Result<Dataset> {
    check_magic(images_path, images, IDX_IMAGES_MAGIC)?;
    check_len(images_path, images, 16)?;
    let count = be_u32(images, 4) as usize;
    let rows = be_u32(images, 8) as usize;
    let cols = be_u32(images, 12) as usize;
    let pixels = rows * cols;
    check_len(images_path, images, 16 + count * pixels)?;

    check_magic(labels_path, labels, IDX_LABELS_MAGIC)?;
    check_len(labels_path, labels, 8)?;
    let label_count = be_u32(labels, 4) as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        }
        .into());
    }
    check_len(labels_path, labels, 8 + count)?;

    let ys: Vec<usize> = labels[8..8 + count].iter().map(|&b| b as usize).collect();
    if let Some((i, &y)) = ys.iter().enumerate().find(|(_, &y)| y >= IDX_CLASSES) {
        return Err(DataError::LabelRange {
            path: labels_path.to_path_buf(),
            index: i,
            label: y,
            classes: IDX_CLASSES,
        }
        .into());
    }
    let xs = images[16..16 + count * pixels]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let mut ds = Dataset::new(Tensor::matrix(count, pixels, xs)?, ys, IDX_CLASSES, Split::Train)?;
    ds.image = Some(ImageShape {
        channels: 1,
        height: rows,
        width: cols,
    });
    Ok(ds)
}

/// Per-channel `(x − mean) / std` applied after scaling to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Record stride for the 10-class (`label + image`) and 100-class
/// (`coarse + fine + image`) layouts.
pub fn cifar_record_len(k_classes: usize) -> Result<usize> {
    match k_classes {
        10 => Ok(1 + CIFAR_IMAGE_BYTES),
        100 => Ok(2 + CIFAR_IMAGE_BYTES),
        _ => Err(Error::config(format!("CIFAR binaries have 10 or 100 classes, not {k_classes}"))),
    }
}

/// Loads and concatenates CIFAR binary files. For the 100-class layout the
/// fine label is used.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], k_classes: usize, norm: Option<&ChannelNorm>) -> Result<Dataset> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in paths {
        let path = p.as_ref();
        cifar_records(&read(path)?, path, k_classes, &mut xs, &mut ys)?;
    }
    finish_cifar(xs, ys, k_classes, norm)
}

pub fn cifar_from_bytes(bytes: &[u8], source: &Path, k_classes: usize, norm: Option<&ChannelNorm>) -> Result<Dataset> {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    cifar_records(bytes, source, k_classes, &mut xs, &mut ys)?;
    finish_cifar(xs, ys, k_classes, norm)
}

fn cifar_records(bytes: &[u8], path: &Path, k: usize, xs: &mut Vec<f64>, ys: &mut Vec<usize>) -> Result<()> {
    let stride = cifar_record_len(k)?;
    if bytes.len() % stride != 0 || bytes.is_empty() {
        return Err(DataError::RecordStride {
            path: path.to_path_buf(),
            len: bytes.len(),
            stride,
        }
        .into());
    }
    let label_at = stride - CIFAR_IMAGE_BYTES - 1;
    for (i, rec) in bytes.chunks_exact(stride).enumerate() {
        let y = rec[label_at] as usize;
        if y >= k {
            return Err(DataError::LabelRange {
                path: path.to_path_buf(),
                index: ys.len() + i,
                label: y,
                classes: k,
            }
            .into());
        }
        ys.push(y);
        xs.extend(rec[stride - CIFAR_IMAGE_BYTES..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

fn finish_cifar(mut xs: Vec<f64>, ys: Vec<usize>, k: usize, norm: Option<&ChannelNorm>) -> Result<Dataset> {
    if let Some(norm) = norm {
        if norm.mean.len() != 3 || norm.std.len() != 3 || norm.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("CIFAR normalization needs 3 means and 3 positive stds"));
        }
        let plane = CIFAR_IMAGE_BYTES / 3;
        for (j, v) in xs.iter_mut().enumerate() {
            let c = (j % CIFAR_IMAGE_BYTES) / plane;
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
    }
    let n = ys.len();
    let mut ds = Dataset::new(Tensor::matrix(n, CIFAR_IMAGE_BYTES, xs)?, ys, k, Split::Train)?;
    ds.image = Some(ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    });
    Ok(ds)
}

/// Mirrors every `C×H×W` image row left-to-right in place.
pub fn flip_horizontal(row: &mut [f64], shape: &ImageShape) {
    for line in row.chunks_exact_mut(shape.width) {
        line.reverse();
    }
    debug_assert_eq!(row.len(), shape.channels * shape.height * shape.width);
}
