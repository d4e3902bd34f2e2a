use crate::error::{Error, Result};
use crate::tensor::{SparseTensor, TensorShape};
use crate::Real;

use super::idx::MnistSet;
use super::SparseDataset;

/// Pixels below this byte value are treated as background.
pub const MNIST_THRESHOLD: u8 = 50;

/// Side of the centered crop fed to the 24x24 network.
pub const MNIST_CROP: usize = 24;

/// Thresholds one byte image and stores surviving pixels as `v / 255`.
///
/// With `crop = Some(s)` only the centered `s x s` window is kept.
pub fn sparsify_image(pixels: &[u8], rows: usize, cols: usize, crop: Option<usize>) -> Result<SparseTensor> {
    if pixels.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for a {rows}x{cols} image",
            pixels.len()
        )));
    }
    let (h, w) = match crop {
        Some(s) if s == 0 || s > rows || s > cols => {
            return Err(Error::InvalidParameter(format!("crop {s} for a {rows}x{cols} image")))
        }
        Some(s) => (s, s),
        None => (rows, cols),
    };
    let (top, left) = ((rows - h) / 2, (cols - w) / 2);
    let shape = TensorShape::new(1, vec![h, w], 1)?;
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = pixels[(top + r) * cols + left + c];
            if v >= MNIST_THRESHOLD {
                keys.push((r * w + c) as u64);
                values.push(v as Real / 255.0);
            }
        }
    }
    Ok(SparseTensor::from_parts_unchecked(shape, keys, values))
}

/// Sparsifies a whole split into a labelled dataset with ten classes.
pub fn sparsify_mnist(set: &MnistSet, crop: Option<usize>) -> Result<SparseDataset> {
    let images = &set.images;
    let samples = (0..images.len())
        .map(|i| sparsify_image(images.image(i), images.rows, images.cols, crop))
        .collect::<Result<Vec<_>>>()?;
    let labels = set.labels.iter().map(|&l| l as usize).collect();
    SparseDataset::new(samples, labels, 10)
}
