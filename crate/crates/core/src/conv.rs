//! Direct sparse convolution with a per-slab dense accumulation buffer.
//!
//! For every `(batch, output channel)` pair the products of nonzero inputs and
//! nonzero weights are scatter-added into a spatial-only dense buffer. The
//! nonzero buffer entries then receive the channel bias, are cut down to the
//! k strongest responses when the layer has a density bound, and are appended
//! to the output in key order.
//!
//! An input entry at `d` reached through filter tap `f` lands on output
//! `d + f - center` (SAME zero padding, stride 1).

use rayon::prelude::*;

use crate::attention::{select_in_place, AttentionVariant, DensityBound};
use crate::error::{Error, Result};
use crate::tensor::{spatial_coords, strides, SparseFilter, SparseTensor, TensorShape};
use crate::Real;

/// A sparse convolution layer: filter bank, per-channel bias and attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvConfig {
    pub filter: SparseFilter,
    pub bias: Vec<Real>,
    pub rho_up: DensityBound,
    pub attention: AttentionVariant,
}

impl ConvConfig {
    /// Unbounded layer with zero bias.
    pub fn new(filter: SparseFilter) -> Self {
        let bias = vec![0.0; filter.shape().out_channels()];
        Self {
            filter,
            bias,
            rho_up: DensityBound::Unbounded,
            attention: AttentionVariant::Raw,
        }
    }

    pub fn with_bias(mut self, bias: Vec<Real>) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_bound(mut self, rho_up: DensityBound, attention: AttentionVariant) -> Self {
        self.rho_up = rho_up;
        self.attention = attention;
        self
    }

    pub fn output_shape(&self, input: &TensorShape) -> Result<TensorShape> {
        input.with_channels(self.filter.shape().out_channels())
    }
}

/// Spatial-only scratch buffer reused for every `(batch, output channel)` pass.
#[derive(Debug, Clone, Default)]
pub struct DenseBuffer {
    data: Vec<Real>,
}

impl DenseBuffer {
    pub fn new(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn for_shape(shape: &TensorShape) -> Self {
        Self::new(shape.spatial_volume())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Zeroed view of the first `need` entries.
    pub(crate) fn prepare(&mut self, need: usize) -> Result<&mut [Real]> {
        if self.data.len() < need {
            return Err(Error::BufferTooSmall {
                have: self.data.len(),
                need,
            });
        }
        let slice = &mut self.data[..need];
        slice.fill(0.0);
        Ok(slice)
    }
}

/// Result of a forward pass together with its multiply-accumulate count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvOutput {
    pub output: SparseTensor,
    pub mac_ops: u64,
}

/// Output coordinate updated by input `data` under filter tap `tap`, or `None`
/// when it falls into the zero padding.
pub fn get_update_id(
    data: &[usize],
    tap: &[usize],
    filter_extent: &[usize],
    input_spatial: &[usize],
) -> Option<Vec<usize>> {
    data.iter()
        .zip(tap)
        .zip(filter_extent.iter().zip(input_spatial))
        .map(|((&d, &f), (&ext, &size))| {
            let out = (d + f).checked_sub(ext / 2)?;
            (out < size).then_some(out)
        })
        .collect()
}

/// Decoded geometry shared by the forward and backward passes.
pub(crate) struct ConvPlan<'a> {
    pub input: &'a SparseTensor,
    pub filter: &'a SparseFilter,
    pub dims: Vec<i64>,
    pub rank: usize,
    /// Spatial coordinates of every input entry, `rank` per entry.
    pub coords: Vec<i64>,
    /// Spatial offset of every input entry.
    pub linear: Vec<usize>,
    /// Tap offsets relative to the kernel center, `rank` per filter entry.
    pub taps: Vec<i64>,
    /// Linear offset of every tap within the input grid.
    pub tap_linear: Vec<i64>,
    pub volume: usize,
}

impl<'a> ConvPlan<'a> {
    pub fn new(input: &'a SparseTensor, filter: &'a SparseFilter) -> Result<Self> {
        let shape = input.shape();
        let fshape = filter.shape();
        if shape.channels() != fshape.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, filter expects {}",
                shape.channels(),
                fshape.in_channels()
            )));
        }
        if shape.rank() != fshape.rank() {
            return Err(Error::ShapeMismatch(format!(
                "input has spatial rank {}, filter has rank {}",
                shape.rank(),
                fshape.rank()
            )));
        }
        let rank = shape.rank();
        let volume = shape.spatial_volume();
        let spatial = shape.spatial();
        let grid_strides = strides(spatial);

        let mut coords = vec![0i64; input.nnz() * rank];
        let mut linear = Vec::with_capacity(input.nnz());
        let mut scratch = vec![0usize; rank];
        for (i, &key) in input.keys().iter().enumerate() {
            let (_, _, s) = shape.split(key);
            spatial_coords(s, spatial, &mut scratch);
            for d in 0..rank {
                coords[i * rank + d] = scratch[d] as i64;
            }
            linear.push(s);
        }

        let extent = fshape.spatial();
        let mut taps = vec![0i64; filter.nnz() * rank];
        let mut tap_linear = Vec::with_capacity(filter.nnz());
        for (j, &key) in filter.keys().iter().enumerate() {
            let (_, _, s) = fshape.split(key);
            spatial_coords(s, extent, &mut scratch);
            let mut lin = 0i64;
            for d in 0..rank {
                let off = scratch[d] as i64 - (extent[d] / 2) as i64;
                taps[j * rank + d] = off;
                lin += off * grid_strides[d] as i64;
            }
            tap_linear.push(lin);
        }

        Ok(Self {
            input,
            filter,
            dims: spatial.iter().map(|&s| s as i64).collect(),
            rank,
            coords,
            linear,
            taps,
            tap_linear,
            volume,
        })
    }

    /// Visits every in-bounds `(input position, filter position, output offset)`
    /// triple contributing to `(batch, oc)`, in input-channel, input-entry,
    /// filter-entry order. Returns the number of visits.
    #[inline]
    pub fn for_each_update(
        &self,
        batch: usize,
        oc: usize,
        mut visit: impl FnMut(usize, usize, usize),
    ) -> u64 {
        let rank = self.rank;
        let mut count = 0u64;
        for ic in 0..self.filter.shape().in_channels() {
            let taps = self.filter.group_range(oc, ic);
            if taps.is_empty() {
                continue;
            }
            for i in self.input.slab_range(batch, ic) {
                let x = &self.coords[i * rank..(i + 1) * rank];
                let base = self.linear[i] as i64;
                'taps: for j in taps.clone() {
                    let t = &self.taps[j * rank..(j + 1) * rank];
                    for d in 0..rank {
                        let o = x[d] + t[d];
                        if o < 0 || o >= self.dims[d] {
                            continue 'taps;
                        }
                    }
                    visit(i, j, (base + self.tap_linear[j]) as usize);
                    count += 1;
                }
            }
        }
        count
    }

    /// Accumulates the `(batch, oc)` slab into `buffer`.
    fn accumulate(&self, batch: usize, oc: usize, buffer: &mut [Real]) -> u64 {
        let values = self.input.values();
        let weights = self.filter.values();
        self.for_each_update(batch, oc, |i, j, uid| {
            buffer[uid] += values[i] * weights[j];
        })
    }
}

/// Extracts nonzeros from `buffer` (zeroing it), adds bias, applies attention.
fn emit(
    buffer: &mut [Real],
    bias: Real,
    budget: Option<usize>,
    variant: AttentionVariant,
) -> Vec<(u64, Real)> {
    let mut entries = Vec::new();
    for (s, slot) in buffer.iter_mut().enumerate() {
        if *slot != 0.0 {
            let v = *slot + bias;
            *slot = 0.0;
            if v != 0.0 {
                entries.push((s as u64, v));
            }
        }
    }
    if let Some(k) = budget {
        select_in_place(&mut entries, k, variant);
        debug_assert!(entries.len() <= k, "fill-in bound exceeded");
    }
    entries
}

fn validate(input: &SparseTensor, cfg: &ConvConfig) -> Result<Option<usize>> {
    let oc = cfg.filter.shape().out_channels();
    if cfg.bias.len() != oc {
        return Err(Error::ShapeMismatch(format!(
            "bias has {} entries for {} output channels",
            cfg.bias.len(),
            oc
        )));
    }
    cfg.rho_up.budget(input.shape().spatial_volume())
}

fn assemble(
    shape: TensorShape,
    slabs: impl IntoIterator<Item = ((usize, usize), Vec<(u64, Real)>)>,
) -> SparseTensor {
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for ((b, oc), entries) in slabs {
        for (s, v) in entries {
            keys.push(shape.key(b, oc, s as usize));
            values.push(v);
        }
    }
    SparseTensor::from_parts_unchecked(shape, keys, values)
}

/// Sequential forward pass.
pub fn sparse_conv_forward(
    input: &SparseTensor,
    cfg: &ConvConfig,
    buffer: &mut DenseBuffer,
) -> Result<ConvOutput> {
    let budget = validate(input, cfg)?;
    let plan = ConvPlan::new(input, &cfg.filter)?;
    let out_shape = cfg.output_shape(input.shape())?;
    let buf = buffer.prepare(plan.volume)?;
    let mut mac_ops = 0;
    let mut slabs = Vec::with_capacity(out_shape.batch() * out_shape.channels());
    for b in 0..out_shape.batch() {
        for oc in 0..out_shape.channels() {
            mac_ops += plan.accumulate(b, oc, buf);
            slabs.push(((b, oc), emit(buf, cfg.bias[oc], budget, cfg.attention)));
        }
    }
    Ok(ConvOutput {
        output: assemble(out_shape, slabs),
        mac_ops,
    })
}

/// Forward pass parallel over `(batch, output channel)` pairs, each with a
/// private buffer. The result is identical to [`sparse_conv_forward`].
pub fn sparse_conv_forward_parallel(input: &SparseTensor, cfg: &ConvConfig) -> Result<ConvOutput> {
    let budget = validate(input, cfg)?;
    let plan = ConvPlan::new(input, &cfg.filter)?;
    let out_shape = cfg.output_shape(input.shape())?;
    let channels = out_shape.channels();
    let results: Vec<_> = (0..out_shape.batch() * channels)
        .into_par_iter()
        .map_init(
            || vec![0.0; plan.volume],
            |buf, job| {
                let (b, oc) = (job / channels, job % channels);
                let macs = plan.accumulate(b, oc, buf);
                (((b, oc), emit(buf, cfg.bias[oc], budget, cfg.attention)), macs)
            },
        )
        .collect();
    let mac_ops = results.iter().map(|r| r.1).sum();
    Ok(ConvOutput {
        output: assemble(out_shape, results.into_iter().map(|r| r.0)),
        mac_ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_sparse_tensor;
    use crate::tensor::{FilterShape, Index};

    #[test]
    fn update_id_center_is_identity() {
        assert_eq!(
            get_update_id(&[2, 2], &[1, 1], &[3, 3], &[5, 5]),
            Some(vec![2, 2])
        );
    }

    #[test]
    fn update_id_outside_is_absent() {
        assert_eq!(get_update_id(&[0, 0], &[0, 0], &[3, 3], &[5, 5]), None);
        assert_eq!(get_update_id(&[4, 4], &[2, 1], &[3, 3], &[5, 5]), None);
    }

    #[test]
    fn update_id_offset() {
        assert_eq!(
            get_update_id(&[1, 1], &[2, 0], &[3, 3], &[5, 5]),
            Some(vec![2, 0])
        );
    }

    fn identity_filter(channels: usize) -> SparseFilter {
        let shape = FilterShape::cube(1, 2, channels, channels).unwrap();
        SparseFilter::from_entries(
            shape.clone(),
            (0..channels).map(|c| (shape.key(c, c, 0), 1.0)),
        )
        .unwrap()
    }

    #[test]
    fn identity_convolution() {
        let input = random_sparse_tensor(TensorShape::new(2, vec![5, 6], 3).unwrap(), 0.3, 9).unwrap();
        let cfg = ConvConfig::new(identity_filter(3));
        let mut buf = DenseBuffer::for_shape(input.shape());
        let out = sparse_conv_forward(&input, &cfg, &mut buf).unwrap();
        assert_eq!(out.output, input);
        assert_eq!(out.mac_ops, input.nnz() as u64);
    }

    #[test]
    fn all_ones_kernel_spreads_center() {
        let shape = TensorShape::new(1, vec![3, 3], 1).unwrap();
        let input = SparseTensor::from_indexed(shape, [(Index::new(0, [1, 1], 0), 2.0)]).unwrap();
        let fshape = FilterShape::cube(3, 2, 1, 1).unwrap();
        let filter = SparseFilter::from_entries(fshape, (0..9).map(|k| (k, 1.0))).unwrap();
        let mut buf = DenseBuffer::new(9);
        let out = sparse_conv_forward(&input, &ConvConfig::new(filter), &mut buf).unwrap();
        assert_eq!(out.output.keys(), &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert!(out.output.values().iter().all(|&v| v == 2.0));
        assert_eq!(out.mac_ops, 9);
    }

    #[test]
    fn bias_only_on_nonzeros_and_exact_zero_dropped() {
        let shape = TensorShape::new(1, vec![4], 1).unwrap();
        let input = SparseTensor::from_entries(shape, [(0, 1.0), (2, 3.0)]).unwrap();
        let fshape = FilterShape::cube(1, 1, 1, 1).unwrap();
        let filter = SparseFilter::from_entries(fshape, [(0, 1.0)]).unwrap();
        let cfg = ConvConfig::new(filter).with_bias(vec![-1.0]);
        let mut buf = DenseBuffer::new(4);
        let out = sparse_conv_forward(&input, &cfg, &mut buf).unwrap();
        // position 0: 1 - 1 = 0 is dropped; positions 1 and 3 stay structurally zero
        assert_eq!(out.output.keys(), &[2]);
        assert_eq!(out.output.values(), &[2.0]);
    }

    #[test]
    fn bounded_output_respects_budget() {
        let shape = TensorShape::new(2, vec![8, 8], 2).unwrap();
        let input = random_sparse_tensor(shape, 0.3, 3).unwrap();
        let fshape = FilterShape::cube(3, 2, 2, 3).unwrap();
        let filter = SparseFilter::random_uniform(fshape, 0.7, 4).unwrap();
        for variant in [AttentionVariant::Raw, AttentionVariant::Magnitude] {
            let cfg = ConvConfig::new(filter.clone()).with_bound(DensityBound::Bounded(0.1), variant);
            let mut buf = DenseBuffer::new(64);
            let out = sparse_conv_forward(&input, &cfg, &mut buf).unwrap().output;
            for b in 0..2 {
                for oc in 0..3 {
                    assert!(out.slab_range(b, oc).len() <= 7);
                }
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let shape = TensorShape::new(3, vec![6, 5, 4], 2).unwrap();
        let input = random_sparse_tensor(shape, 0.2, 11).unwrap();
        let fshape = FilterShape::cube(3, 3, 2, 4).unwrap();
        let filter = SparseFilter::random_uniform(fshape, 0.5, 12).unwrap();
        let cfg = ConvConfig::new(filter)
            .with_bias(vec![0.1, -0.2, 0.0, 0.3])
            .with_bound(DensityBound::Bounded(0.2), AttentionVariant::Magnitude);
        let mut buf = DenseBuffer::new(120);
        let seq = sparse_conv_forward(&input, &cfg, &mut buf).unwrap();
        let par = sparse_conv_forward_parallel(&input, &cfg).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn shape_errors() {
        let input = random_sparse_tensor(TensorShape::new(1, vec![4, 4], 2).unwrap(), 0.5, 1).unwrap();
        let filter = identity_filter(3);
        let mut buf = DenseBuffer::new(16);
        assert!(matches!(
            sparse_conv_forward(&input, &ConvConfig::new(filter), &mut buf),
            Err(Error::ShapeMismatch(_))
        ));
        let cfg = ConvConfig::new(identity_filter(2));
        let mut small = DenseBuffer::new(8);
        assert!(matches!(
            sparse_conv_forward(&input, &cfg, &mut small),
            Err(Error::BufferTooSmall { have: 8, need: 16 })
        ));
        let bad_bias = ConvConfig::new(identity_filter(2)).with_bias(vec![0.0]);
        assert!(sparse_conv_forward(&input, &bad_bias, &mut buf).is_err());
    }
}
