//! Dataset loading (IDX, CIFAR-10 binary), label linking and batch streams.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ff::{text_enum, LinkedBatch, Polarity};
use crate::linalg::{DenseMatrix, Rng};

pub const NUM_LABELS: usize = 10;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
}

text_enum!(DatasetName {
    Mnist => "mnist",
    FashionMnist => "fashion_mnist",
    Cifar10 => "cifar10",
});

impl DatasetName {
    /// Flattened sample dimension.
    pub fn dim(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => 784,
            DatasetName::Cifar10 => 3072,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

text_enum!(Split {
    Train => "train",
    Test => "test",
});

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × d`, pixel values in `[0, 1]`.
    pub images: DenseMatrix,
    pub labels: Vec<usize>,
    pub name: DatasetName,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: DenseMatrix, labels: Vec<usize>, name: DatasetName, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= NUM_LABELS) {
            return Err(Error::Consistency(format!("label {bad} outside 0..{NUM_LABELS}")));
        }
        Ok(Dataset {
            images,
            labels,
            name,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn num_labels(&self) -> usize {
        NUM_LABELS
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name,
            split: self.split,
        }
    }

    /// First `n` samples of a seeded permutation (all samples if `n ≥ len`).
    pub fn random_subset(&self, n: usize, rng: &mut Rng) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        order.truncate(n.min(self.len()));
        self.subset(&order)
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({} × {})", self.name, self.split, self.len(), self.dim())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn expect_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::format(
            path,
            format!("expected magic {expected:#010x}, found {found:#010x}"),
        ));
    }
    Ok(())
}

/// Loads a pair of IDX files (optionally gzip-compressed).
pub fn load_idx(
    name: DatasetName,
    split: Split,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(images_path)?;
    expect_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let d = rows * cols;
    let body = &img[16..];
    if body.len() != n * d {
        return Err(Error::format(
            images_path,
            format!("expected {} pixel bytes for {n}×{rows}×{cols}, found {}", n * d, body.len()),
        ));
    }

    let lab = read_file(labels_path)?;
    expect_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    let label_bytes = &lab[8..];
    if label_bytes.len() != n_labels {
        return Err(Error::format(
            labels_path,
            format!("expected {n_labels} label bytes, found {}", label_bytes.len()),
        ));
    }
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {n_labels} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    if d != name.dim() {
        return Err(Error::format(
            images_path,
            format!("{name} expects {} pixels per image, found {d}", name.dim()),
        ));
    }

    let pixels = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = DenseMatrix::from_vec(n, d, pixels)?;
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, name, split)
}

/// Loads and concatenates CIFAR-10 binary batches of 3073-byte records.
pub fn load_cifar_bin<P: AsRef<Path>>(split: Split, batch_paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let path = p.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() {
            warn!("{} is empty", path.display());
            continue;
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let images = DenseMatrix::from_vec(labels.len(), 3072, pixels)?;
    Dataset::new(images, labels, DatasetName::Cifar10, split)
}

fn first_existing(dir: &Path, names: &[String]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::io(
                dir.join(&names[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
            )
        })
}

/// Loads a split from a directory laid out like the upstream distributions:
/// `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` for the MNIST family,
/// `data_batch_{1..5}.bin` / `test_batch.bin` (optionally under
/// `cifar-10-batches-bin/`) for CIFAR-10.
pub fn load_dir(name: DatasetName, split: Split, dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let candidates = |kind: &str| {
                let base = format!("{prefix}-{kind}-ubyte");
                vec![format!("{base}.gz"), base]
            };
            let images = first_existing(dir, &candidates("images-idx3"))?;
            let labels = first_existing(dir, &candidates("labels-idx1"))?;
            load_idx(name, split, images, labels)
        }
        DatasetName::Cifar10 => {
            let nested = dir.join("cifar-10-batches-bin");
            let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![root.join("test_batch.bin")],
            };
            load_cifar_bin(split, &files)
        }
    }
}

/// `x` followed by a one-hot block for `label`.
pub fn link(x: &[f64], label: usize, num_labels: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(x.len() + num_labels);
    row.extend_from_slice(x);
    row.extend((0..num_labels).map(|y| if y == label { 1.0 } else { 0.0 }));
    row
}

/// Uniform draw from the labels other than `true_label`.
pub fn wrong_label(true_label: usize, num_labels: usize, rng: &mut Rng) -> usize {
    let r = rng.below(num_labels - 1);
    if r >= true_label {
        r + 1
    } else {
        r
    }
}

/// Links every sample to the given labels, marking the rows whose label
/// matches the truth as positive.
pub fn link_all(ds: &Dataset, linked_labels: &[usize]) -> LinkedBatch {
    let n = ds.len();
    let width = ds.dim() + ds.num_labels();
    let mut data = Vec::with_capacity(n * width);
    for (s, &y) in linked_labels.iter().enumerate() {
        data.extend(link(ds.images.row(s), y, ds.num_labels()));
    }
    let polarity = linked_labels
        .iter()
        .zip(&ds.labels)
        .map(|(l, t)| if l == t { Polarity::Positive } else { Polarity::Negative })
        .collect();
    LinkedBatch {
        inputs: DenseMatrix::from_vec(n, width, data).expect("finite pixels"),
        polarity,
        true_labels: ds.labels.clone(),
        linked_labels: linked_labels.to_vec(),
    }
}

/// One epoch of shuffled, label-linked batches.
///
/// The permutation is drawn when the stream is created; wrong labels are
/// drawn batch by batch as the stream is consumed. Each source sample yields
/// one positive row followed by `negatives_per_positive` negative rows.
pub fn make_linked_batches<'a>(
    ds: &'a Dataset,
    rng: &'a mut Rng,
    batch_size: usize,
    negatives_per_positive: usize,
) -> LinkedBatches<'a> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    LinkedBatches {
        ds,
        rng,
        order,
        cursor: 0,
        batch_size: batch_size.max(1),
        negatives_per_positive,
    }
}

pub struct LinkedBatches<'a> {
    ds: &'a Dataset,
    rng: &'a mut Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    negatives_per_positive: usize,
}

impl Iterator for LinkedBatches<'_> {
    type Item = LinkedBatch;

    fn next(&mut self) -> Option<LinkedBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let labels = self.ds.num_labels();
        let negatives = if labels > 1 { self.negatives_per_positive } else { 0 };
        let rows = (end - self.cursor) * (1 + negatives);
        let width = self.ds.dim() + labels;
        let mut data = Vec::with_capacity(rows * width);
        let mut polarity = Vec::with_capacity(rows);
        let mut true_labels = Vec::with_capacity(rows);
        let mut linked_labels = Vec::with_capacity(rows);
        for &s in &self.order[self.cursor..end] {
            let x = self.ds.images.row(s);
            let y = self.ds.labels[s];
            data.extend(link(x, y, labels));
            polarity.push(Polarity::Positive);
            true_labels.push(y);
            linked_labels.push(y);
            for _ in 0..negatives {
                let wrong = wrong_label(y, labels, self.rng);
                data.extend(link(x, wrong, labels));
                polarity.push(Polarity::Negative);
                true_labels.push(y);
                linked_labels.push(wrong);
            }
        }
        self.cursor = end;
        Some(LinkedBatch {
            inputs: DenseMatrix::from_vec(rows, width, data).expect("finite pixels"),
            polarity,
            true_labels,
            linked_labels,
        })
    }
}
