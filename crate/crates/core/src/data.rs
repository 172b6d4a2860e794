//! Dataset ingestion: MNIST IDX files and synthetic low-rank classification
//! data. Loaders are strict; malformed files are rejected without producing
//! partial datasets. No network access anywhere.

use std::fs;
use std::path::Path;

use crate::rng::Rng;
use crate::{DenseTensor, Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    /// (num_samples, features), row per sample.
    pub inputs: DenseTensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: DenseTensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.ndim() != 2 || inputs.dims()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "inputs {:?} vs {} labels",
                inputs.dims(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.inputs.dims()[1]
    }

    /// Gather the rows at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (DenseTensor, Vec<usize>) {
        let width = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        (
            DenseTensor::new(vec![indices.len(), width], data).unwrap(),
            labels,
        )
    }

    /// First `n` samples, in order.
    pub fn head(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (inputs, labels) = self.batch(&indices);
        LabeledDataset {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }
}

struct IdxReader<'a> {
    file: &'a str,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &Path, file: &'a str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Format {
            file: file.to_string(),
            reason: format!("cannot read: {e}"),
        })?;
        Ok(IdxReader {
            file,
            bytes,
            pos: 0,
        })
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.to_string(),
            reason: reason.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(self.fail("truncated header"));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn take_rest(&mut self, expected: usize) -> Result<&[u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < expected {
            return Err(self.fail(format!(
                "truncated payload: expected {expected} bytes, found {}",
                rest.len()
            )));
        }
        if rest.len() > expected {
            return Err(self.fail(format!(
                "trailing bytes: expected {expected}, found {}",
                rest.len()
            )));
        }
        Ok(rest)
    }
}

/// Big-endian IDX image file (magic 2051) as rows scaled to [0, 1].
fn read_idx_images(path: &Path, file: &str) -> Result<DenseTensor> {
    let mut r = IdxReader::open(path, file)?;
    let magic = r.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.fail(format!(
            "bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = r.read_u32()? as usize;
    let rows = r.read_u32()? as usize;
    let cols = r.read_u32()? as usize;
    let pixels = r.take_rest(count * rows * cols)?;
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    DenseTensor::new(vec![count.max(1), rows * cols], data)
}

/// Big-endian IDX label file (magic 2049).
fn read_idx_labels(path: &Path, file: &str) -> Result<Vec<usize>> {
    let mut r = IdxReader::open(path, file)?;
    let magic = r.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.fail(format!(
            "bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = r.read_u32()? as usize;
    let raw = r.take_rest(count)?;
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Load the four-file MNIST layout from `dir`: returns (train, test) with
/// 784-wide rows in [0, 1] and labels 0-9.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let part = |images: &str, labels: &str| -> Result<LabeledDataset> {
        let inputs = read_idx_images(&dir.join(images), images)?;
        let labels_vec = read_idx_labels(&dir.join(labels), labels)?;
        if inputs.dims()[0] != labels_vec.len() {
            return Err(Error::Format {
                file: labels.to_string(),
                reason: format!(
                    "{} labels for {} images",
                    labels_vec.len(),
                    inputs.dims()[0]
                ),
            });
        }
        LabeledDataset::new(inputs, labels_vec, 10)
    };
    let train = part("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = part("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

/// Classification data from a planted low-rank map: scores are `W x` with
/// `W = A B` of the given rank, the label is the argmax (noise, when
/// nonzero, perturbs scores before the argmax). Returns the dataset and the
/// planted matrix.
pub fn synthetic_lowrank(
    classes: usize,
    features: usize,
    true_rank: usize,
    n_samples: usize,
    noise: f64,
    seed: u64,
) -> Result<(LabeledDataset, DenseTensor)> {
    if classes < 2 {
        return Err(Error::Argument("need at least two classes".into()));
    }
    if true_rank == 0 || true_rank > classes.min(features) {
        return Err(Error::Argument(format!(
            "true rank {true_rank} must lie in [1, min({classes}, {features})]"
        )));
    }
    if n_samples == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let mut rng = Rng::from_seed(seed);
    let a = DenseTensor::new(
        vec![classes, true_rank],
        (0..classes * true_rank).map(|_| rng.normal()).collect(),
    )?;
    let b = DenseTensor::new(
        vec![true_rank, features],
        (0..true_rank * features).map(|_| rng.normal()).collect(),
    )?;
    let w = a.matmul(&b)?;

    let mut inputs = Vec::with_capacity(n_samples * features);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x: Vec<f64> = (0..features).map(|_| rng.normal()).collect();
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..classes {
            let mut score = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                score += w.get(&[c, j]) * xj;
            }
            if noise > 0.0 {
                score += noise * rng.normal();
            }
            if score > best.1 {
                best = (c, score);
            }
        }
        inputs.extend_from_slice(&x);
        labels.push(best.0);
    }
    let dataset = LabeledDataset::new(
        DenseTensor::new(vec![n_samples, features], inputs)?,
        labels,
        classes,
    )?;
    Ok((dataset, w))
}
