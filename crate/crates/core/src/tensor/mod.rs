//! Coordinate-list tensors with compressed 1D keys.
//!
//! A [`SparseTensor`] stores only its nonzero entries as parallel arrays of
//! strictly increasing keys and values. [`SparseGradient`] carries gradients
//! aligned with the key set of some forward tensor and, unlike feature maps,
//! may hold exact zeros.

mod dense;
mod filter;
mod memory;
mod shape;

use std::ops::Range;

pub use dense::DenseTensor;
pub use filter::{DenseFilter, FilterShape, SparseFilter};
pub use memory::{memory_estimate, IndexWidth, MemoryEstimate, MemoryModel};
pub use shape::{spatial_coords, spatial_linear, Index, TensorShape};

pub(crate) use shape::strides;

use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    shape: TensorShape,
    keys: Vec<u64>,
    values: Vec<Real>,
}

impl SparseTensor {
    pub fn empty(shape: TensorShape) -> Self {
        Self {
            shape,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a tensor from unordered `(key, value)` pairs.
    ///
    /// Exact zeros are dropped. Duplicate keys are an error.
    pub fn from_entries(
        shape: TensorShape,
        entries: impl IntoIterator<Item = (u64, Real)>,
    ) -> Result<Self> {
        let mut entries: Vec<(u64, Real)> = entries.into_iter().collect();
        entries.sort_unstable_by_key(|e| e.0);
        let total = shape.len();
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateKey(w[0].0));
            }
        }
        if let Some(&(key, _)) = entries.last() {
            if key >= total {
                return Err(Error::KeyOutOfRange { key, total });
            }
        }
        let (keys, values) = entries.into_iter().filter(|e| e.1 != 0.0).unzip();
        Ok(Self {
            shape,
            keys,
            values,
        })
    }

    /// Builds a tensor from expanded indices.
    pub fn from_indexed(
        shape: TensorShape,
        entries: impl IntoIterator<Item = (Index, Real)>,
    ) -> Result<Self> {
        let keyed = entries
            .into_iter()
            .map(|(i, v)| shape.encode(&i).map(|k| (k, v)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(shape, keyed)
    }

    /// Builds a tensor from already canonical arrays, validating every invariant.
    pub fn from_sorted(shape: TensorShape, keys: Vec<u64>, values: Vec<Real>) -> Result<Self> {
        validate_keys(&keys, values.len(), shape.len())?;
        if let Some(p) = values.iter().position(|&v| v == 0.0) {
            return Err(Error::StoredZero(p));
        }
        Ok(Self {
            shape,
            keys,
            values,
        })
    }

    pub(crate) fn from_parts_unchecked(
        shape: TensorShape,
        keys: Vec<u64>,
        values: Vec<Real>,
    ) -> Self {
        debug_assert!(validate_keys(&keys, values.len(), shape.len()).is_ok());
        debug_assert!(values.iter().all(|&v| v != 0.0));
        Self {
            shape,
            keys,
            values,
        }
    }

    pub fn from_dense(dense: &DenseTensor) -> Self {
        let (keys, values) = dense
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, &v)| (k as u64, v))
            .unzip();
        Self {
            shape: dense.shape().clone(),
            keys,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut dense = DenseTensor::zeros(self.shape.clone());
        let out = dense.values_mut();
        for (&k, &v) in self.keys.iter().zip(&self.values) {
            out[k as usize] = v;
        }
        dense
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    /// Fraction of stored entries, `nnz / total`.
    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.shape.len() as f64
    }

    pub fn get(&self, key: u64) -> Option<Real> {
        self.keys.binary_search(&key).ok().map(|p| self.values[p])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, Real)> + '_ {
        self.keys.iter().copied().zip(self.values.iter().copied())
    }

    /// Storage positions belonging to one `(batch, channel)` slab.
    pub fn slab_range(&self, batch: usize, channel: usize) -> Range<usize> {
        key_range(&self.keys, self.shape.slab(batch, channel))
    }

    /// Multiplies every value by `alpha`; a zero factor yields an empty tensor.
    pub fn scaled(&self, alpha: Real) -> Self {
        Self::from_entries(
            self.shape.clone(),
            self.iter().map(|(k, v)| (k, v * alpha)),
        )
        .expect("keys already canonical")
    }

    pub fn into_parts(self) -> (TensorShape, Vec<u64>, Vec<Real>) {
        (self.shape, self.keys, self.values)
    }
}

/// Gradient values aligned with a sorted key set of a forward tensor.
///
/// The key set is fixed by the forward pass, so entries may be exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    shape: TensorShape,
    keys: Vec<u64>,
    values: Vec<Real>,
}

impl SparseGradient {
    pub fn new(shape: TensorShape, keys: Vec<u64>, values: Vec<Real>) -> Result<Self> {
        validate_keys(&keys, values.len(), shape.len())?;
        Ok(Self {
            shape,
            keys,
            values,
        })
    }

    /// A zero gradient over the key set of `t`.
    pub fn zeros_like(t: &SparseTensor) -> Self {
        Self {
            shape: t.shape.clone(),
            keys: t.keys.clone(),
            values: vec![0.0; t.nnz()],
        }
    }

    /// Uses the stored values of `t` as gradient values.
    pub fn from_tensor(t: &SparseTensor) -> Self {
        Self {
            shape: t.shape.clone(),
            keys: t.keys.clone(),
            values: t.values.clone(),
        }
    }

    pub(crate) fn from_parts_unchecked(
        shape: TensorShape,
        keys: Vec<u64>,
        values: Vec<Real>,
    ) -> Self {
        debug_assert!(validate_keys(&keys, values.len(), shape.len()).is_ok());
        Self {
            shape,
            keys,
            values,
        }
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: u64) -> Option<Real> {
        self.keys.binary_search(&key).ok().map(|p| self.values[p])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, Real)> + '_ {
        self.keys.iter().copied().zip(self.values.iter().copied())
    }

    pub fn slab_range(&self, batch: usize, channel: usize) -> Range<usize> {
        key_range(&self.keys, self.shape.slab(batch, channel))
    }

    /// True when every key of `self` also appears in `keys` (both sorted).
    pub fn keys_subset_of(&self, keys: &[u64]) -> bool {
        let mut it = keys.iter().peekable();
        'outer: for &k in &self.keys {
            while let Some(&&other) = it.peek() {
                it.next();
                if other == k {
                    continue 'outer;
                }
                if other > k {
                    return false;
                }
            }
            return false;
        }
        true
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut dense = DenseTensor::zeros(self.shape.clone());
        let out = dense.values_mut();
        for (&k, &v) in self.keys.iter().zip(&self.values) {
            out[k as usize] = v;
        }
        dense
    }
}

fn key_range(keys: &[u64], range: Range<u64>) -> Range<usize> {
    let start = keys.partition_point(|&k| k < range.start);
    let end = start + keys[start..].partition_point(|&k| k < range.end);
    start..end
}

pub(crate) fn validate_keys(keys: &[u64], values: usize, total: u64) -> Result<()> {
    if keys.len() != values {
        return Err(Error::ShapeMismatch(format!(
            "{} keys but {} values",
            keys.len(),
            values
        )));
    }
    for (p, w) in keys.windows(2).enumerate() {
        if w[0] >= w[1] {
            return Err(if w[0] == w[1] {
                Error::DuplicateKey(w[0])
            } else {
                Error::UnsortedKeys(p + 1)
            });
        }
    }
    if let Some(&key) = keys.last() {
        if key >= total {
            return Err(Error::KeyOutOfRange { key, total });
        }
    }
    Ok(())
}
