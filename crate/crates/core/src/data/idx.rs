//! IDX container parsing (the MNIST distribution format).
//!
//! Layout: two zero bytes, a type code (0x08 = unsigned byte), the number of
//! dimensions, then one big-endian `u32` per dimension, then the raw data.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// A stack of equally sized byte images stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        if self.rows * self.cols == 0 {
            return 0;
        }
        self.pixels.len() / (self.rows * self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

fn read_u32(bytes: &[u8], offset: usize, context: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(context, offset as u64, "truncated header"))
}

fn header(bytes: &[u8], magic: u32, context: &'static str) -> Result<Vec<usize>> {
    let found = read_u32(bytes, 0, context)?;
    if found != magic {
        return Err(Error::format(
            context,
            0,
            format!("magic number {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    (0..ndims)
        .map(|d| read_u32(bytes, 4 + 4 * d, context).map(|v| v as usize))
        .collect()
}

fn payload<'a>(bytes: &'a [u8], dims: &[usize], context: &'static str) -> Result<&'a [u8]> {
    let start = 4 + 4 * dims.len();
    let need = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(context, 4, "dimensions overflow"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            context,
            bytes.len() as u64,
            format!("truncated data: {need} bytes declared, {have} present"),
        ));
    }
    if have > need {
        return Err(Error::format(
            context,
            (start + need) as u64,
            format!("{} trailing bytes", have - need),
        ));
    }
    Ok(&bytes[start..])
}

/// Parses an uncompressed IDX image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    const CONTEXT: &str = "idx images";
    let dims = header(bytes, IMAGES_MAGIC, CONTEXT)?;
    if dims[1] == 0 || dims[2] == 0 {
        return Err(Error::format(CONTEXT, 8, "zero image extent"));
    }
    let data = payload(bytes, &dims, CONTEXT)?;
    Ok(IdxImages {
        rows: dims[1],
        cols: dims[2],
        pixels: data.to_vec(),
    })
}

/// Parses an uncompressed IDX label file; labels must be digits 0-9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const CONTEXT: &str = "idx labels";
    let dims = header(bytes, LABELS_MAGIC, CONTEXT)?;
    let data = payload(bytes, &dims, CONTEXT)?;
    if let Some(i) = data.iter().position(|&l| l > 9) {
        return Err(Error::format(
            CONTEXT,
            (8 + i) as u64,
            format!("label {} outside 0-9", data[i]),
        ));
    }
    Ok(data.to_vec())
}

/// Inflates gzip input; anything else is returned unchanged.
pub fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Images and labels of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistSet {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

/// Loads an image/label file pair, either of which may be gzip-compressed.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<MnistSet> {
    let images = parse_idx_images(&maybe_gunzip(fs::read(images)?)?)?;
    let labels = parse_idx_labels(&maybe_gunzip(fs::read(labels)?)?)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            "idx labels",
            4,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    Ok(MnistSet { images, labels })
}

/// Serializes images in IDX form (used for fixtures and tooling).
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
