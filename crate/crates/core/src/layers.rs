//! Sparse ReLU and max-pooling, the sparse-to-dense bridge, and the dense
//! classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{spatial_coords, spatial_linear, DenseTensor, SparseTensor, TensorShape};
use crate::Real;

/// Keeps strictly positive entries unchanged and drops the rest.
pub fn sparse_relu(x: &SparseTensor) -> SparseTensor {
    let (keys, values) = x.iter().filter(|&(_, v)| v > 0.0).unzip();
    SparseTensor::from_parts_unchecked(x.shape().clone(), keys, values)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub strides: Vec<usize>,
}

impl PoolConfig {
    /// The same stride in every one of `rank` dimensions.
    pub fn uniform(stride: usize, rank: usize) -> Self {
        Self {
            strides: vec![stride; rank],
        }
    }

    /// Output shape; partial windows at the upper border form their own cluster.
    pub fn output_shape(&self, input: &TensorShape) -> Result<TensorShape> {
        if self.strides.len() != input.rank() {
            return Err(Error::ShapeMismatch(format!(
                "{} pooling strides for spatial rank {}",
                self.strides.len(),
                input.rank()
            )));
        }
        if self.strides.contains(&0) {
            return Err(Error::InvalidParameter("pooling stride must be positive".into()));
        }
        let spatial: Vec<usize> = input
            .spatial()
            .iter()
            .zip(&self.strides)
            .map(|(&s, &st)| s.div_ceil(st))
            .collect();
        TensorShape::new(input.batch(), spatial, input.channels())
    }
}

/// For every pooled entry, the input entry that attained the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRouting {
    pub input_shape: TensorShape,
    pub input_keys: Vec<u64>,
    pub output_keys: Vec<u64>,
    /// Storage position in the input of each output's argmax.
    pub witness: Vec<usize>,
}

/// Max-pooling over clusters of entries that share `floor(index / stride)`.
///
/// Empty clusters produce no output. Ties go to the smaller input key.
pub fn sparse_max_pool(x: &SparseTensor, cfg: &PoolConfig) -> Result<(SparseTensor, PoolRouting)> {
    let in_shape = x.shape();
    let out_shape = cfg.output_shape(in_shape)?;
    let rank = in_shape.rank();
    let mut coords = vec![0usize; rank];
    let mut assigned: Vec<(u64, usize)> = Vec::with_capacity(x.nnz());
    for (i, &key) in x.keys().iter().enumerate() {
        let (b, c, s) = in_shape.split(key);
        spatial_coords(s, in_shape.spatial(), &mut coords);
        for (c, &st) in coords.iter_mut().zip(&cfg.strides) {
            *c /= st;
        }
        let s_out = spatial_linear(&coords, out_shape.spatial())?;
        assigned.push((out_shape.key(b, c, s_out), i));
    }
    // stable: members of a cluster stay in ascending input-key order
    assigned.sort_by_key(|a| a.0);

    let values = x.values();
    let mut out_keys = Vec::new();
    let mut out_values = Vec::new();
    let mut witness = Vec::new();
    let mut start = 0;
    while start < assigned.len() {
        let key = assigned[start].0;
        let mut best = assigned[start].1;
        let mut end = start + 1;
        while end < assigned.len() && assigned[end].0 == key {
            let i = assigned[end].1;
            if values[i] > values[best] {
                best = i;
            }
            end += 1;
        }
        out_keys.push(key);
        out_values.push(values[best]);
        witness.push(best);
        start = end;
    }
    let routing = PoolRouting {
        input_shape: in_shape.clone(),
        input_keys: x.keys().to_vec(),
        output_keys: out_keys.clone(),
        witness,
    };
    Ok((
        SparseTensor::from_parts_unchecked(out_shape, out_keys, out_values),
        routing,
    ))
}

/// Materializes a sparse feature map for the dense part of a network.
pub fn sparse_to_dense(x: &SparseTensor) -> DenseTensor {
    x.to_dense()
}

/// `weights * x + bias` with `weights` stored row-major as `bias.len() x x.len()`.
pub fn fully_connected_forward(x: &[Real], weights: &[Real], bias: &[Real]) -> Result<Vec<Real>> {
    if weights.len() != x.len() * bias.len() {
        return Err(Error::ShapeMismatch(format!(
            "weight matrix has {} entries for {} inputs and {} outputs",
            weights.len(),
            x.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Ok(bias.to_vec());
    }
    Ok(weights
        .chunks_exact(x.len())
        .zip(bias)
        .map(|(row, &b)| dot(row, x) + b)
        .collect())
}

#[inline]
pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    // four independent partial sums let the compiler vectorize
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4 * 4;
    for (ca, cb) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        sum += x * y;
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the per-element scale that was
/// applied (0 for dropped elements, `1 / (1 - rate)` for survivors).
pub fn dropout_forward<R: Rng + ?Sized>(
    x: &[Real],
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<Real>, Vec<Real>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.to_vec(), vec![1.0; x.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<Real> = x
        .iter()
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok((x.iter().zip(&mask).map(|(v, m)| v * m).collect(), mask))
}
