//! Convolutional networks on coordinate-list sparse tensors.
//!
//! Feature maps are [`SparseTensor`]s: sorted 64-bit keys plus values.
//! Convolutions run directly on the stored entries with a reusable dense
//! spatial buffer ([`conv`]), optionally keeping only the `k` strongest
//! responses per channel ([`attention`]). Gradients flow only to stored
//! inputs and live weights ([`backprop`]), and training combines a
//! density-steering L2 penalty with two-strike magnitude pruning ([`train`]).
//! The [`oracle`] module holds naive dense reference implementations.

pub mod attention;
pub mod backprop;
pub mod checkpoint;
pub mod container;
pub mod conv;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use attention::{k_select, AttentionVariant, DensityBound};
pub use conv::{sparse_conv_forward, sparse_conv_forward_parallel, ConvConfig, ConvOutput, DenseBuffer};
pub use error::{Error, Result};
pub use tensor::{
    DenseFilter, DenseTensor, FilterShape, SparseFilter, SparseGradient, SparseTensor, TensorShape,
};

/// Scalar type used for all values, weights and gradients.
pub type Real = f64;

/// `ceil(fraction * total)`, ignoring rounding noise in the product so that
/// e.g. `0.3 * 10` counts as exactly 3.
pub fn ceil_count(fraction: f64, total: usize) -> usize {
    let x = fraction * total as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}
