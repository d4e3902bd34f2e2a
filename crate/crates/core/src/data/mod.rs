//! Datasets: MNIST ingestion and sparsification, random sparse tensors and a
//! small synthetic classification task.

pub mod idx;
mod mnist;
mod synthetic;

pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, IdxImages, MnistSet};
pub use mnist::{sparsify_image, sparsify_mnist, MNIST_CROP, MNIST_THRESHOLD};
pub use synthetic::{pattern_dataset, random_sparse_tensor};

use crate::error::{Error, Result};
use crate::tensor::{SparseTensor, TensorShape};

/// Single-sample sparse tensors with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    samples: Vec<SparseTensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl SparseDataset {
    /// Every sample must have batch size 1 and the same shape.
    pub fn new(samples: Vec<SparseTensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples with {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(first) = samples.first() {
            let shape = first.shape();
            if shape.batch() != 1 || samples.iter().any(|s| s.shape() != shape) {
                return Err(Error::ShapeMismatch("samples must share one single-batch shape".into()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidParameter(format!("label {l} for {classes} classes")));
        }
        Ok(Self {
            samples,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[SparseTensor] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Shape of one sample, if any.
    pub fn sample_shape(&self) -> Option<&TensorShape> {
        self.samples.first().map(|s| s.shape())
    }

    pub fn mean_density(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.density()).sum::<f64>() / self.samples.len() as f64
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            samples: self.samples[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Stacks the selected samples into one minibatch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(SparseTensor, Vec<usize>)> {
        let parts: Vec<&SparseTensor> = indices.iter().map(|&i| &self.samples[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((stack(&parts)?, labels))
    }
}

/// Concatenates single-sample tensors along the batch dimension.
pub fn stack(parts: &[&SparseTensor]) -> Result<SparseTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot stack zero samples".into()))?;
    let shape = first.shape();
    if shape.batch() != 1 || parts.iter().any(|p| p.shape() != shape) {
        return Err(Error::ShapeMismatch("stacked samples must share one single-batch shape".into()));
    }
    let stride = shape.len();
    let out_shape = shape.with_batch(parts.len())?;
    let nnz = parts.iter().map(|p| p.nnz()).sum();
    let mut keys = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    for (b, p) in parts.iter().enumerate() {
        keys.extend(p.keys().iter().map(|&k| k + b as u64 * stride));
        values.extend_from_slice(p.values());
    }
    Ok(SparseTensor::from_parts_unchecked(out_shape, keys, values))
}
