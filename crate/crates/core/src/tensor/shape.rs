use serde::{Deserialize, Serialize};

use crate::error::{Dim, Error, Result};

/// Shape of a feature map: batch count, spatial resolution per dimension, channel count.
///
/// Keys are a mixed-radix encoding with the batch most significant, then the
/// channel, then the spatial coordinates in row-major order. Sorting keys
/// therefore sorts a tensor by batch, then by channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    batch: usize,
    spatial: Vec<usize>,
    channels: usize,
}

/// An expanded tensor coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Index {
    pub batch: usize,
    pub spatial: Vec<usize>,
    pub channel: usize,
}

impl Index {
    pub fn new(batch: usize, spatial: impl Into<Vec<usize>>, channel: usize) -> Self {
        Self {
            batch,
            spatial: spatial.into(),
            channel,
        }
    }
}

impl TensorShape {
    pub fn new(batch: usize, spatial: impl Into<Vec<usize>>, channels: usize) -> Result<Self> {
        let spatial = spatial.into();
        if batch == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!(
                "batch ({batch}) and channel ({channels}) counts must be positive"
            )));
        }
        check_spatial(&spatial)?;
        let total = spatial
            .iter()
            .try_fold(batch as u64, |acc, &s| acc.checked_mul(s as u64))
            .and_then(|acc| acc.checked_mul(channels as u64));
        if total.is_none() {
            return Err(Error::InvalidShape(
                "element count does not fit in a 64-bit key".into(),
            ));
        }
        if spatial
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .is_none()
        {
            return Err(Error::InvalidShape(
                "spatial volume does not fit in memory".into(),
            ));
        }
        Ok(Self {
            batch,
            spatial,
            channels,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial dimensions.
    pub fn rank(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial_volume(&self) -> usize {
        self.spatial.iter().product()
    }

    /// Total element count `b * prod(spatial) * c`.
    pub fn len(&self) -> u64 {
        self.batch as u64 * self.spatial_volume() as u64 * self.channels as u64
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Same shape with a different channel count.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        Self::new(self.batch, self.spatial.clone(), channels)
    }

    /// Same shape with a different batch count.
    pub fn with_batch(&self, batch: usize) -> Result<Self> {
        Self::new(batch, self.spatial.clone(), self.channels)
    }

    pub fn encode(&self, index: &Index) -> Result<u64> {
        if index.batch >= self.batch {
            return Err(Error::IndexOutOfRange {
                dim: Dim::Batch,
                value: index.batch,
                size: self.batch,
            });
        }
        if index.channel >= self.channels {
            return Err(Error::IndexOutOfRange {
                dim: Dim::Channel,
                value: index.channel,
                size: self.channels,
            });
        }
        let s = spatial_linear(&index.spatial, &self.spatial)?;
        Ok(self.key(index.batch, index.channel, s))
    }

    pub fn decode(&self, key: u64) -> Result<Index> {
        if key >= self.len() {
            return Err(Error::KeyOutOfRange {
                key,
                total: self.len(),
            });
        }
        let (batch, channel, s) = self.split(key);
        let mut spatial = vec![0; self.rank()];
        spatial_coords(s, &self.spatial, &mut spatial);
        Ok(Index {
            batch,
            spatial,
            channel,
        })
    }

    /// Key of `(batch, channel, spatial offset)`; the caller guarantees ranges.
    #[inline]
    pub fn key(&self, batch: usize, channel: usize, spatial: usize) -> u64 {
        debug_assert!(batch < self.batch && channel < self.channels);
        ((batch * self.channels + channel) as u64) * self.spatial_volume() as u64 + spatial as u64
    }

    /// Inverse of [`TensorShape::key`] for an in-range key.
    #[inline]
    pub fn split(&self, key: u64) -> (usize, usize, usize) {
        let volume = self.spatial_volume() as u64;
        let group = key / volume;
        let s = (key % volume) as usize;
        let group = group as usize;
        (group / self.channels, group % self.channels, s)
    }

    /// Key range `[start, end)` covering one `(batch, channel)` slab.
    pub fn slab(&self, batch: usize, channel: usize) -> std::ops::Range<u64> {
        let start = self.key(batch, channel, 0);
        start..start + self.spatial_volume() as u64
    }
}

pub(crate) fn check_spatial(spatial: &[usize]) -> Result<()> {
    if spatial.is_empty() {
        return Err(Error::InvalidShape(
            "at least one spatial dimension is required".into(),
        ));
    }
    if let Some(d) = spatial.iter().position(|&s| s == 0) {
        return Err(Error::InvalidShape(format!(
            "spatial dimension {d} has size zero"
        )));
    }
    Ok(())
}

/// Row-major offset of `coords` within `dims`.
pub fn spatial_linear(coords: &[usize], dims: &[usize]) -> Result<usize> {
    if coords.len() != dims.len() {
        return Err(Error::ShapeMismatch(format!(
            "index has {} spatial coordinates, shape has {}",
            coords.len(),
            dims.len()
        )));
    }
    let mut linear = 0usize;
    for (d, (&c, &s)) in coords.iter().zip(dims).enumerate() {
        if c >= s {
            return Err(Error::IndexOutOfRange {
                dim: Dim::Spatial(d),
                value: c,
                size: s,
            });
        }
        linear = linear * s + c;
    }
    Ok(linear)
}

/// Expands a row-major offset into `out`.
#[inline]
pub fn spatial_coords(mut linear: usize, dims: &[usize], out: &mut [usize]) {
    for d in (0..dims.len()).rev() {
        out[d] = linear % dims[d];
        linear /= dims[d];
    }
}

/// Row-major strides for `dims`.
pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for d in (0..dims.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * dims[d + 1];
    }
    strides
}
