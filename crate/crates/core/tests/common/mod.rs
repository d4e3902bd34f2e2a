#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenet_core::data::random_sparse_tensor;
use sparsenet_core::{
    sparse_conv_forward, AttentionVariant, ConvConfig, ConvOutput, DenseBuffer, DensityBound, FilterShape,
    SparseFilter, SparseTensor, TensorShape,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| <= rel * max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// One randomized convolution problem.
#[derive(Debug, Clone)]
pub struct Case {
    pub input: SparseTensor,
    pub filter: SparseFilter,
    pub rho_d: f64,
    pub rho_f: f64,
}

pub const DENSITIES: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0];

/// Random shape with rank 1..=3, extent up to `max_side`, up to 4 channels
/// each way and batch up to 3.
pub fn random_case(seed: u64, max_side: usize) -> Case {
    let mut r = rng(seed);
    let rank = r.gen_range(1..=3);
    let spatial: Vec<usize> = (0..rank).map(|_| r.gen_range(1..=max_side)).collect();
    let kernel = if r.gen_bool(0.8) { 3 } else { [1, 5][r.gen_range(0..2)] };
    let batch = r.gen_range(1..=3);
    let cin = r.gen_range(1..=4);
    let cout = r.gen_range(1..=4);
    let rho_d = DENSITIES[r.gen_range(0..DENSITIES.len())];
    let rho_f = DENSITIES[r.gen_range(0..DENSITIES.len())];
    let shape = TensorShape::new(batch, spatial, cin).unwrap();
    let input = random_sparse_tensor(shape, rho_d, r.gen()).unwrap();
    let fshape = FilterShape::cube(kernel, rank, cin, cout).unwrap();
    let filter = SparseFilter::random_uniform(fshape, rho_f, r.gen()).unwrap();
    Case {
        input,
        filter,
        rho_d,
        rho_f,
    }
}

/// Forward pass that independently checks the fill-in bound: every
/// `(batch, output channel)` slab holds at most `ceil(rho_up * volume)`
/// entries.
pub fn checked_forward(input: &SparseTensor, cfg: &ConvConfig) -> ConvOutput {
    let out = sparse_conv_forward(input, cfg, &mut DenseBuffer::for_shape(input.shape())).unwrap();
    assert_fill_in(&out.output, cfg.rho_up);
    out
}

pub fn assert_fill_in(out: &SparseTensor, rho_up: DensityBound) {
    let DensityBound::Bounded(rho) = rho_up else {
        return;
    };
    let volume = out.shape().spatial_volume();
    let limit = ((rho * volume as f64) - 1e-9).ceil().max(1.0) as usize;
    for b in 0..out.shape().batch() {
        for c in 0..out.shape().channels() {
            let n = out.slab_range(b, c).len();
            assert!(n <= limit, "slab ({b}, {c}) holds {n} > {limit} entries");
        }
    }
}

pub fn bounded(cfg: ConvConfig, rho: f64, variant: AttentionVariant) -> ConvConfig {
    cfg.with_bound(DensityBound::bounded(rho).unwrap(), variant)
}
