//! Binary container for sparse tensors and filters.
//!
//! ```text
//! sparsenet container 1\n
//! header <n>\n
//! <n bytes of TOML: kind, shape, count, index_bits, endianness, value_type>
//! <count keys, little-endian, index_bits wide>
//! <count values, little-endian f64>
//! ```
//!
//! Round trips are bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FilterShape, IndexWidth, SparseFilter, SparseTensor, TensorShape};
use crate::Real;

pub const CONTAINER_MAGIC: &str = "sparsenet container";
pub const CONTAINER_VERSION: u32 = 1;

/// Writes `<magic> <version>\nheader <len>\n<header>` followed by `payload`.
pub(crate) fn frame(magic: &str, version: u32, header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic} {version}\nheader {}\n", header.len()).into_bytes();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

fn line<'a>(bytes: &'a [u8], start: usize, context: &'static str) -> Result<(&'a str, usize)> {
    let rest = &bytes[start.min(bytes.len())..];
    let end = rest
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(context, start as u64, "missing line terminator"))?;
    let text = std::str::from_utf8(&rest[..end])
        .map_err(|_| Error::format(context, start as u64, "line is not UTF-8"))?;
    Ok((text, start + end + 1))
}

/// Splits a framed file into its header text and the payload offset.
pub(crate) fn unframe<'a>(
    bytes: &'a [u8],
    magic: &str,
    version: u32,
    context: &'static str,
) -> Result<(&'a str, usize)> {
    let (first, next) = line(bytes, 0, context)?;
    let found = first
        .strip_prefix(magic)
        .and_then(|v| v.strip_prefix(' '))
        .ok_or_else(|| Error::format(context, 0, format!("bad magic line {first:?}")))?;
    if found != version.to_string() {
        return Err(Error::Version {
            found: found.to_string(),
            expected: version.to_string(),
        });
    }
    let (second, header_start) = line(bytes, next, context)?;
    let len: usize = second
        .strip_prefix("header ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(context, next as u64, format!("bad header length line {second:?}")))?;
    let header_end = header_start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(context, bytes.len() as u64, "header extends past end of file"))?;
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|e| Error::format(context, (header_start + e.valid_up_to()) as u64, "header is not UTF-8"))?;
    Ok((header, header_end))
}

/// Maps a TOML parse error to a byte offset within the file.
pub(crate) fn header_error(context: &'static str, header_start: usize, err: toml::de::Error) -> Error {
    let offset = err.span().map_or(0, |s| s.start) + header_start;
    Error::format(context, offset as u64, err.message().to_string())
}

/// Sequential little-endian reader over a payload.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize, context: &'static str) -> Self {
        Self { bytes, pos, context }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.context, self.pos as u64, format!("truncated {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn keys(&mut self, count: usize, width: IndexWidth, what: &str) -> Result<Vec<u64>> {
        let w = width.bytes() as usize;
        let n = count
            .checked_mul(w)
            .ok_or_else(|| Error::format(self.context, self.pos as u64, "count overflows"))?;
        let raw = self.take(n, what)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| match width {
                IndexWidth::Bits32 => u32::from_le_bytes(c.try_into().expect("4 bytes")) as u64,
                IndexWidth::Bits64 => u64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect())
    }

    pub fn reals(&mut self, count: usize, what: &str) -> Result<Vec<Real>> {
        let n = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.context, self.pos as u64, "count overflows"))?;
        let raw = self.take(n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.context,
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn push_keys(out: &mut Vec<u8>, keys: &[u64], width: IndexWidth) {
    for &k in keys {
        match width {
            IndexWidth::Bits32 => out.extend_from_slice(&(k as u32).to_le_bytes()),
            IndexWidth::Bits64 => out.extend_from_slice(&k.to_le_bytes()),
        }
    }
}

pub(crate) fn push_reals(out: &mut Vec<u8>, values: &[Real]) {
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    endianness: String,
    value_type: String,
    index_bits: u32,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tensor: Option<TensorShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter: Option<FilterShape>,
}

/// Decoded contents of a container file.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Tensor(SparseTensor),
    Filter(SparseFilter),
}

fn check_width(total: u64, width: IndexWidth) -> Result<()> {
    if width == IndexWidth::Bits32 && total >= 1 << 32 {
        return Err(Error::InvalidParameter(format!(
            "{total} elements do not fit 32-bit keys"
        )));
    }
    Ok(())
}

fn encode(header: Header, keys: &[u64], values: &[Real], width: IndexWidth) -> Result<Vec<u8>> {
    let text = toml::to_string(&header).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut payload = Vec::with_capacity(keys.len() * (width.bytes() as usize + 8));
    push_keys(&mut payload, keys, width);
    push_reals(&mut payload, values);
    Ok(frame(CONTAINER_MAGIC, CONTAINER_VERSION, &text, &payload))
}

fn header_for(kind: &str, count: usize, width: IndexWidth) -> Header {
    Header {
        kind: kind.into(),
        endianness: "little".into(),
        value_type: "f64".into(),
        index_bits: width.bits(),
        count,
        tensor: None,
        filter: None,
    }
}

pub fn encode_tensor(t: &SparseTensor, width: IndexWidth) -> Result<Vec<u8>> {
    check_width(t.shape().len(), width)?;
    let mut h = header_for("tensor", t.nnz(), width);
    h.tensor = Some(t.shape().clone());
    encode(h, t.keys(), t.values(), width)
}

pub fn encode_filter(f: &SparseFilter, width: IndexWidth) -> Result<Vec<u8>> {
    check_width(f.shape().len() as u64, width)?;
    let mut h = header_for("filter", f.nnz(), width);
    h.filter = Some(f.shape().clone());
    encode(h, f.keys(), f.values(), width)
}

/// Parses a container file of either kind.
pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    const CONTEXT: &str = "container";
    let (text, payload) = unframe(bytes, CONTAINER_MAGIC, CONTAINER_VERSION, CONTEXT)?;
    let header_start = payload - text.len();
    let h: Header = toml::from_str(text).map_err(|e| header_error(CONTEXT, header_start, e))?;
    if h.endianness != "little" || h.value_type != "f64" {
        return Err(Error::format(
            CONTEXT,
            header_start as u64,
            format!("unsupported layout {} / {}", h.endianness, h.value_type),
        ));
    }
    let width = IndexWidth::from_bits(h.index_bits)
        .ok_or_else(|| Error::format(CONTEXT, header_start as u64, format!("index width {}", h.index_bits)))?;
    let mut r = Reader::new(bytes, payload, CONTEXT);
    let keys_at = r.position();
    let keys = r.keys(h.count, width, "keys")?;
    let values = r.reals(h.count, "values")?;
    r.finish()?;
    let invalid = |e: Error| Error::format(CONTEXT, keys_at as u64, e.to_string());
    match (h.kind.as_str(), h.tensor, h.filter) {
        ("tensor", Some(shape), None) => {
            let shape = TensorShape::new(shape.batch(), shape.spatial().to_vec(), shape.channels()).map_err(invalid)?;
            Ok(Container::Tensor(SparseTensor::from_sorted(shape, keys, values).map_err(invalid)?))
        }
        ("filter", None, Some(shape)) => {
            let shape = FilterShape::new(shape.spatial().to_vec(), shape.in_channels(), shape.out_channels())
                .map_err(invalid)?;
            Ok(Container::Filter(SparseFilter::from_sorted(shape, keys, values).map_err(invalid)?))
        }
        (kind, _, _) => Err(Error::format(
            CONTEXT,
            header_start as u64,
            format!("kind {kind:?} with mismatched shape table"),
        )),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<SparseTensor> {
    match decode_container(bytes)? {
        Container::Tensor(t) => Ok(t),
        Container::Filter(_) => Err(Error::format("container", 0, "holds a filter, not a tensor")),
    }
}

pub fn decode_filter(bytes: &[u8]) -> Result<SparseFilter> {
    match decode_container(bytes)? {
        Container::Filter(f) => Ok(f),
        Container::Tensor(_) => Err(Error::format("container", 0, "holds a tensor, not a filter")),
    }
}
