use crate::error::{Error, Result};
use crate::Real;

use super::shape::TensorShape;

/// A fully materialized feature map.
///
/// Values are laid out in key order: batch, channel, then spatial row-major,
/// so `values[key]` is the element a sparse tensor stores under `key`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: TensorShape,
    values: Vec<Real>,
}

impl DenseTensor {
    pub fn new(shape: TensorShape, values: Vec<Real>) -> Result<Self> {
        if values.len() as u64 != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "dense array has {} values, shape holds {}",
                values.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        let values = vec![0.0; shape.len() as usize];
        Self { shape, values }
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Real> {
        self.values
    }

    /// Values of one `(batch, channel)` slab.
    pub fn slab(&self, batch: usize, channel: usize) -> &[Real] {
        let r = self.shape.slab(batch, channel);
        &self.values[r.start as usize..r.end as usize]
    }

    /// All channels of one batch item, flattened as `(channel, spatial)`.
    pub fn sample(&self, batch: usize) -> &[Real] {
        let per = self.shape.channels() * self.shape.spatial_volume();
        &self.values[batch * per..(batch + 1) * per]
    }
}
