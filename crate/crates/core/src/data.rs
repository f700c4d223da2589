//! Dataset ingestion: MNIST-family IDX files, CIFAR-10 binary batches,
//! synthetic Gaussian blobs, and seeded subset sampling.
//!
//! Loaders only read raw, already-decompressed files. Pixels are scaled by
//! 1/255 into `[0, 1]` and flattened; no further standardization is applied.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ndcore::Array2;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_LEN: usize = 1 + CIFAR_PIXELS;
const CIFAR_PIXELS: usize = 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;
const IDX_CLASSES: usize = 10;

/// Labelled inputs, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2,
    labels: Vec<usize>,
    c: usize,
    name: String,
}

impl Dataset {
    pub fn new(inputs: Array2, labels: Vec<usize>, c: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Domain(format!("label {bad} outside [0, {c})")));
        }
        Ok(Dataset {
            inputs,
            labels,
            c,
            name: name.into(),
        })
    }

    pub fn inputs(&self) -> &Array2 {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            c: self.c,
            name: self.name.clone(),
        }
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.c];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Copy with `offset` added to every input row.
    pub fn shifted(&self, offset: &[f64]) -> Result<Dataset> {
        let mut inputs = self.inputs.clone();
        inputs.add_row_vector(offset)?;
        Ok(Dataset {
            inputs,
            labels: self.labels.clone(),
            c: self.c,
            name: format!("{}-shifted", self.name),
        })
    }
}

/// The image datasets with published test-set sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn expected_test_size(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist | DatasetKind::Cifar10 => 10_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Fails unless `test_set` has the published test-set size for `kind`.
pub fn verify_test_size(kind: DatasetKind, test_set: &Dataset) -> Result<()> {
    let expected = kind.expected_test_size();
    if test_set.len() != expected {
        return Err(Error::Consistency(format!(
            "{} test set has {} examples, expected {expected}",
            kind.name(),
            test_set.len()
        )));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parses an IDX image file (`0x00000803`) and its label file (`0x00000801`).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let dim = rows * cols;
    let expected = 16 + n * dim;
    if images.len() != expected {
        return Err(Error::format(
            images_path,
            format!("expected {expected} bytes for {n} images of {rows}x{cols}, found {}", images.len()),
        ));
    }

    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::format(
            labels_path,
            format!("{n_labels} labels for {n} images"),
        ));
    }
    if labels.len() != 8 + n {
        return Err(Error::format(
            labels_path,
            format!("expected {} bytes, found {}", 8 + n, labels.len()),
        ));
    }

    let pixels = images[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Array2::from_vec(n, dim, pixels)?;
    let labels: Vec<usize> = labels[8..].iter().map(|&b| usize::from(b)).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= IDX_CLASSES) {
        return Err(Error::format(labels_path, format!("label {bad} out of range")));
    }
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(inputs, labels, IDX_CLASSES, name)
}

/// Parses and concatenates CIFAR-10 binary batches.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() {
            log::warn!("{} is empty; it contributes no records", path.display());
            continue;
        }
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD_LEN}", bytes.len()),
            ));
        }
        for (i, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            let label = usize::from(record[0]);
            if label >= CIFAR_CLASSES {
                return Err(Error::format(path, format!("record {i} has label {label}")));
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let inputs = Array2::from_vec(labels.len(), CIFAR_PIXELS, pixels)?;
    Dataset::new(inputs, labels, CIFAR_CLASSES, "cifar10")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads one split from a directory holding either the four standard
/// MNIST/FashionMNIST IDX files or the CIFAR-10 binary batches (directly or
/// under `cifar-10-batches-bin/`).
pub fn load_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
    }
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if images.is_file() && labels.is_file() {
        let mut ds = load_idx(&images, &labels)?;
        ds.name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(ds.name);
        return Ok(ds);
    }
    for root in [dir.to_path_buf(), dir.join("cifar-10-batches-bin")] {
        let batches: Vec<PathBuf> = match split {
            Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![root.join("test_batch.bin")],
        };
        if batches.iter().all(|p| p.is_file()) {
            return load_cifar10(&batches);
        }
    }
    Err(Error::Config(format!(
        "{} holds neither IDX files ({prefix}-images-idx3-ubyte, ...) nor CIFAR-10 batches",
        dir.display()
    )))
}

/// Draws `n` examples without replacement, deterministically per `(seed, n)`.
///
/// With `stratify`, each class contributes `⌊n/C⌋` examples (or all it has,
/// if fewer) and the remainder is drawn uniformly from what is left. The
/// returned order is shuffled.
pub fn subset(dataset: &Dataset, n: usize, seed: u64, stratify: bool) -> Result<Dataset> {
    let total = dataset.len();
    if n == 0 || n > total {
        return Err(Error::Config(format!(
            "subset size {n} outside [1, {total}] for {}",
            dataset.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = if stratify {
        let quota = n / dataset.c;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.c];
        for (i, &y) in dataset.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut chosen = Vec::with_capacity(n);
        let mut rest = Vec::with_capacity(total);
        for (class, members) in by_class.iter_mut().enumerate() {
            if members.is_empty() && quota > 0 {
                return Err(Error::Config(format!(
                    "class {class} has no examples but stratified subset needs {quota}"
                )));
            }
            members.shuffle(&mut rng);
            let take = quota.min(members.len());
            chosen.extend_from_slice(&members[..take]);
            rest.extend_from_slice(&members[take..]);
        }
        let missing = n - chosen.len();
        chosen.extend(sample(&mut rng, rest.len(), missing).into_iter().map(|j| rest[j]));
        chosen
    } else {
        sample(&mut rng, total, n).into_vec()
    };
    chosen.shuffle(&mut rng);
    Ok(dataset.select(&chosen))
}

/// Blob centers: scaled basis vectors when `c <= dim`, otherwise a regular
/// polygon in the first two coordinates (or evenly spaced points on a line
/// when `dim == 1`). Neighbouring centers are `separation` apart.
pub fn blob_centers(c: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..c)
        .map(|k| {
            let mut center = vec![0.0; dim];
            if c <= dim {
                center[k] = separation / std::f64::consts::SQRT_2;
            } else if dim >= 2 {
                let radius = separation / (2.0 * (std::f64::consts::PI / c as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            } else if dim == 1 {
                center[0] = separation * k as f64;
            }
            center
        })
        .collect()
}

/// Unit vector spanning the coordinates no blob center uses; falls back to
/// the normalized all-ones direction when every coordinate is used.
pub fn off_manifold_direction(c: usize, dim: usize) -> Vec<f64> {
    let used = if c <= dim { c } else { dim.min(2) };
    let mut dir = vec![0.0; dim];
    let free = if used < dim { used..dim } else { 0..dim };
    let norm = (free.len() as f64).sqrt();
    for d in free {
        dir[d] = 1.0 / norm;
    }
    dir
}

/// Isotropic unit-variance Gaussian clusters around [`blob_centers`],
/// `n_per_class` each, returned in shuffled order.
pub fn synth_blobs(c: usize, n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if c < 2 {
        return Err(Error::Config(format!("synthetic blobs need at least 2 classes, got {c}")));
    }
    if dim == 0 {
        return Err(Error::Config("synthetic blobs need dim >= 1".into()));
    }
    let centers = blob_centers(c, dim, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c * n_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for &slot in &order {
        let class = slot % c;
        labels.push(class);
        for &mu in &centers[class] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + z);
        }
    }
    Dataset::new(
        Array2::from_vec(n, dim, data)?,
        labels,
        c,
        format!("blobs-c{c}-d{dim}-s{separation}"),
    )
}

/// [`synth_blobs`] moved by `shift` standard deviations along
/// [`off_manifold_direction`]; an out-of-distribution counterpart to the
/// unshifted blobs.
pub fn synth_shifted_blobs(
    c: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    shift: f64,
) -> Result<Dataset> {
    let base = synth_blobs(c, n_per_class, dim, separation, seed)?;
    let offset: Vec<f64> = off_manifold_direction(c, dim).iter().map(|d| d * shift).collect();
    base.shifted(&offset)
}
