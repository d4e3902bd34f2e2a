use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of a stored key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IndexWidth {
    Bits32,
    Bits64,
}

impl IndexWidth {
    pub fn bytes(self) -> u64 {
        match self {
            IndexWidth::Bits32 => 4,
            IndexWidth::Bits64 => 8,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes() as u32 * 8
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(IndexWidth::Bits32),
            64 => Some(IndexWidth::Bits64),
            _ => None,
        }
    }
}

/// Storage accounting constants.
///
/// Values are accounted at 32 bits regardless of the compute precision; each
/// voxel of the temporary dense buffer is accounted at 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub index_width: IndexWidth,
}

impl MemoryModel {
    pub const VALUE_BYTES: u64 = 4;
    pub const BUFFER_ENTRY_BYTES: u64 = 8;

    pub fn new(index_width: IndexWidth) -> Self {
        Self { index_width }
    }
}

/// Bytes needed by one layer output, split by storage kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    /// Dense output tensor.
    pub dense: u64,
    /// Sparse output at the density bound: keys plus values.
    pub sparse: u64,
    /// Temporary per-(batch, channel) dense buffer.
    pub temp: u64,
}

/// Memory footprint of a layer output at resolution `r` in `rank` dimensions.
///
/// `dense = r^k * b * c * 4`, `sparse = ceil(rho_up * r^k) * b * c * (index + 4)`,
/// `temp = r^k * 8`. A 32-bit model is rejected once the full index space
/// `r^k * b * c` no longer fits in 32 bits.
pub fn memory_estimate(
    resolution: u64,
    rank: u32,
    batch: u64,
    channels: u64,
    rho_up: f64,
    model: MemoryModel,
) -> Result<MemoryEstimate> {
    if resolution == 0 || rank == 0 || batch == 0 || channels == 0 {
        return Err(Error::InvalidParameter(
            "resolution, rank, batch and channels must be positive".into(),
        ));
    }
    if !(rho_up > 0.0 && rho_up <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "density bound {rho_up} outside (0, 1]"
        )));
    }
    let overflow = || Error::InvalidParameter("index space overflows 64 bits".into());
    let volume = resolution.checked_pow(rank).ok_or_else(overflow)?;
    let elements = volume
        .checked_mul(batch)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(overflow)?;
    if model.index_width == IndexWidth::Bits32 && elements >= 1 << 32 {
        return Err(Error::InvalidParameter(format!(
            "index space of {elements} elements does not fit 32-bit keys"
        )));
    }
    let per_slab = crate::ceil_count(rho_up, volume as usize) as u64;
    Ok(MemoryEstimate {
        dense: elements * MemoryModel::VALUE_BYTES,
        sparse: per_slab * batch * channels * (model.index_width.bytes() + MemoryModel::VALUE_BYTES),
        temp: volume * MemoryModel::BUFFER_ENTRY_BYTES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: f64 = 1e9;

    fn at(r: u64, width: IndexWidth) -> Result<MemoryEstimate> {
        memory_estimate(r, 3, 32, 8, 1.0 / r as f64, MemoryModel::new(width))
    }

    #[test]
    fn dense_256_cubed() {
        let e = at(256, IndexWidth::Bits64).unwrap();
        assert_eq!(e.dense, 17_179_869_184);
        assert_eq!((e.dense as f64 / GB * 100.0).round() / 100.0, 17.18);
    }

    #[test]
    fn sparse64_64_cubed() {
        let e = at(64, IndexWidth::Bits64).unwrap();
        assert_eq!((e.sparse as f64 / GB * 1000.0).round() / 1000.0, 0.013);
    }

    #[test]
    fn temp_is_eight_bytes_per_voxel() {
        assert_eq!(at(128, IndexWidth::Bits64).unwrap().temp, 128u64.pow(3) * 8);
    }

    #[test]
    fn thirty_two_bit_keys_overflow_at_256() {
        assert!(at(128, IndexWidth::Bits32).is_ok());
        assert!(at(256, IndexWidth::Bits32).is_err());
    }

    #[test]
    fn break_even_density_with_64_bit_keys() {
        // value-only dense storage vs key+value sparse storage: 4 / 12 = 1/3
        let model = MemoryModel::new(IndexWidth::Bits64);
        let below = memory_estimate(30, 2, 1, 1, 0.33, model).unwrap();
        assert!(below.sparse < below.dense);
        let above = memory_estimate(30, 2, 1, 1, 0.34, model).unwrap();
        assert!(above.sparse > above.dense);
    }

    #[test]
    fn bad_arguments() {
        let model = MemoryModel::new(IndexWidth::Bits64);
        assert!(memory_estimate(0, 3, 1, 1, 0.5, model).is_err());
        assert!(memory_estimate(8, 3, 1, 1, 0.0, model).is_err());
    }
}
