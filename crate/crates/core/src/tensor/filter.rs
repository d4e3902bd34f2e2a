use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Dim, Error, Result};
use crate::Real;

use super::shape::{check_spatial, spatial_linear};
use super::validate_keys;

/// Geometry of a filter bank: odd kernel extent per spatial dimension plus
/// input and output channel counts.
///
/// Filter keys are `((oc * c_in + ic) * kernel_volume + spatial)`, so sorting
/// keys sorts weights by output channel, then input channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterShape {
    spatial: Vec<usize>,
    in_channels: usize,
    out_channels: usize,
}

impl FilterShape {
    pub fn new(spatial: impl Into<Vec<usize>>, in_channels: usize, out_channels: usize) -> Result<Self> {
        let spatial = spatial.into();
        check_spatial(&spatial)?;
        if let Some(d) = spatial.iter().position(|&s| s % 2 == 0) {
            return Err(Error::InvalidShape(format!(
                "filter extent {} in spatial dimension {d} is not odd",
                spatial[d]
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidShape("filter channel counts must be positive".into()));
        }
        let volume: usize = spatial.iter().product();
        if volume
            .checked_mul(in_channels)
            .and_then(|v| v.checked_mul(out_channels))
            .is_none()
        {
            return Err(Error::InvalidShape("filter too large".into()));
        }
        Ok(Self {
            spatial,
            in_channels,
            out_channels,
        })
    }

    /// A cubic kernel of extent `size` in each of `rank` dimensions.
    pub fn cube(size: usize, rank: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(vec![size; rank], in_channels, out_channels)
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn rank(&self) -> usize {
        self.spatial.len()
    }

    pub fn kernel_volume(&self) -> usize {
        self.spatial.iter().product()
    }

    /// Number of weight slots, stored or not.
    pub fn len(&self) -> usize {
        self.kernel_volume() * self.in_channels * self.out_channels
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn key(&self, oc: usize, ic: usize, spatial: usize) -> u64 {
        ((oc * self.in_channels + ic) * self.kernel_volume() + spatial) as u64
    }

    #[inline]
    pub fn split(&self, key: u64) -> (usize, usize, usize) {
        let volume = self.kernel_volume();
        let key = key as usize;
        let group = key / volume;
        (group / self.in_channels, group % self.in_channels, key % volume)
    }

    pub fn encode(&self, oc: usize, ic: usize, spatial: &[usize]) -> Result<u64> {
        if oc >= self.out_channels {
            return Err(Error::IndexOutOfRange {
                dim: Dim::OutChannel,
                value: oc,
                size: self.out_channels,
            });
        }
        if ic >= self.in_channels {
            return Err(Error::IndexOutOfRange {
                dim: Dim::InChannel,
                value: ic,
                size: self.in_channels,
            });
        }
        Ok(self.key(oc, ic, spatial_linear(spatial, &self.spatial)?))
    }

    /// Key range covering the `(oc, ic)` kernel.
    pub fn group(&self, oc: usize, ic: usize) -> Range<u64> {
        let start = self.key(oc, ic, 0);
        start..start + self.kernel_volume() as u64
    }
}

/// A filter bank in coordinate-list form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFilter {
    shape: FilterShape,
    keys: Vec<u64>,
    values: Vec<Real>,
}

impl SparseFilter {
    /// Builds a filter from unordered `(key, weight)` pairs; exact zeros are dropped.
    pub fn from_entries(
        shape: FilterShape,
        entries: impl IntoIterator<Item = (u64, Real)>,
    ) -> Result<Self> {
        let mut entries: Vec<(u64, Real)> = entries.into_iter().collect();
        entries.sort_unstable_by_key(|e| e.0);
        entries.retain(|e| e.1 != 0.0);
        let (keys, values): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        validate_keys(&keys, values.len(), shape.len() as u64)?;
        Ok(Self {
            shape,
            keys,
            values,
        })
    }

    /// Builds a filter from canonical arrays. Stored zeros are accepted: during
    /// training a live weight may pass through exactly 0.0 without being pruned.
    pub fn from_sorted(shape: FilterShape, keys: Vec<u64>, values: Vec<Real>) -> Result<Self> {
        validate_keys(&keys, values.len(), shape.len() as u64)?;
        Ok(Self {
            shape,
            keys,
            values,
        })
    }

    pub fn from_dense(dense: &DenseFilter) -> Self {
        let (keys, values) = dense
            .values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, &v)| (k as u64, v))
            .unzip();
        Self {
            shape: dense.shape.clone(),
            keys,
            values,
        }
    }

    /// Random filter with exactly `ceil(density * slots)` weights at uniformly
    /// chosen positions, values drawn from `values`.
    pub fn random<R: Rng + ?Sized>(
        shape: FilterShape,
        density: f64,
        rng: &mut R,
        mut values: impl FnMut(&mut R) -> Real,
    ) -> Result<Self> {
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "filter density {density} outside (0, 1]"
            )));
        }
        let slots = shape.len();
        let count = crate::ceil_count(density, slots).min(slots);
        let mut keys: Vec<u64> = sample(rng, slots, count).into_iter().map(|k| k as u64).collect();
        keys.sort_unstable();
        let vals = keys
            .iter()
            .map(|_| loop {
                let v = values(rng);
                if v != 0.0 {
                    break v;
                }
            })
            .collect();
        Ok(Self {
            shape,
            keys,
            values: vals,
        })
    }

    /// Random filter with values uniform in `[-1, 1] \ {0}`, seeded.
    pub fn random_uniform(shape: FilterShape, density: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random(shape, density, &mut rng, |r| r.gen_range(-1.0..=1.0))
    }

    pub fn to_dense(&self) -> DenseFilter {
        let mut values = vec![0.0; self.shape.len()];
        for (&k, &v) in self.keys.iter().zip(&self.values) {
            values[k as usize] = v;
        }
        DenseFilter {
            shape: self.shape.clone(),
            values,
        }
    }

    pub fn shape(&self) -> &FilterShape {
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

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.shape.len() as f64
    }

    pub fn get(&self, key: u64) -> Option<Real> {
        self.keys.binary_search(&key).ok().map(|p| self.values[p])
    }

    /// Storage positions of the `(oc, ic)` kernel.
    pub fn group_range(&self, oc: usize, ic: usize) -> Range<usize> {
        let r = self.shape.group(oc, ic);
        let start = self.keys.partition_point(|&k| k < r.start);
        let end = start + self.keys[start..].partition_point(|&k| k < r.end);
        start..end
    }

    /// Keeps only entries for which `keep(key, value)` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(u64, Real) -> bool) {
        let mut w = 0;
        for r in 0..self.keys.len() {
            if keep(self.keys[r], self.values[r]) {
                self.keys[w] = self.keys[r];
                self.values[w] = self.values[r];
                w += 1;
            }
        }
        self.keys.truncate(w);
        self.values.truncate(w);
    }
}

/// Fully materialized filter bank, laid out in filter-key order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFilter {
    shape: FilterShape,
    values: Vec<Real>,
}

impl DenseFilter {
    pub fn new(shape: FilterShape, values: Vec<Real>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "dense filter has {} values, shape holds {}",
                values.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: FilterShape) -> Self {
        let values = vec![0.0; shape.len()];
        Self { shape, values }
    }

    pub fn shape(&self) -> &FilterShape {
        &self.shape
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    /// Weights of the `(oc, ic)` kernel.
    pub fn kernel(&self, oc: usize, ic: usize) -> &[Real] {
        let r = self.shape.group(oc, ic);
        &self.values[r.start as usize..r.end as usize]
    }
}
