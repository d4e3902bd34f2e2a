//! Masked backpropagation.
//!
//! Gradients exist only where the forward pass stored something: every
//! gradient tensor shares the key set of the forward tensor it belongs to, so
//! its size is fixed for the lifetime of a layer. Entries removed by
//! attention, ReLU or pruning never receive gradient storage.

use rayon::prelude::*;

use crate::conv::{ConvConfig, ConvPlan, DenseBuffer};
use crate::error::{Error, Result};
use crate::layers::PoolRouting;
use crate::tensor::{SparseFilter, SparseGradient, SparseTensor};
use crate::Real;

/// Gradients of one convolution layer, aligned with its forward operands.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    /// Same keys as the forward input.
    pub d_input: SparseGradient,
    /// Same keys as the forward filter.
    pub d_filter: SparseFilter,
    pub d_bias: Vec<Real>,
    /// Multiply-accumulate visits performed.
    pub mac_ops: u64,
}

fn check_d_output(input: &SparseTensor, cfg: &ConvConfig, d_output: &SparseGradient) -> Result<()> {
    let expected = cfg.output_shape(input.shape())?;
    if d_output.shape() != &expected {
        return Err(Error::ShapeMismatch(
            "output gradient shape differs from the layer output shape".into(),
        ));
    }
    if cfg.bias.len() != cfg.filter.shape().out_channels() {
        return Err(Error::ShapeMismatch("bias length differs from output channels".into()));
    }
    Ok(())
}

/// Accumulates the `(batch, oc)` slab. `d_input` is indexed by input storage
/// position minus `offset`.
#[allow(clippy::too_many_arguments)]
fn backward_slab(
    plan: &ConvPlan,
    d_output: &SparseGradient,
    b: usize,
    oc: usize,
    buf: &mut [Real],
    d_input: &mut [Real],
    offset: usize,
    d_filter: &mut [Real],
) -> (Real, u64) {
    let shape = d_output.shape();
    let range = d_output.slab_range(b, oc);
    let mut bias = 0.0;
    for p in range.clone() {
        let (_, _, s) = shape.split(d_output.keys()[p]);
        let g = d_output.values()[p];
        buf[s] = g;
        bias += g;
    }
    if range.is_empty() {
        return (bias, 0);
    }
    let values = plan.input.values();
    let weights = plan.filter.values();
    let macs = plan.for_each_update(b, oc, |i, j, uid| {
        let g = buf[uid];
        d_input[i - offset] += g * weights[j];
        d_filter[j] += g * values[i];
    });
    for p in range {
        let (_, _, s) = shape.split(d_output.keys()[p]);
        buf[s] = 0.0;
    }
    (bias, macs)
}

/// Sequential backward pass of [`crate::conv::sparse_conv_forward`].
///
/// `d_output` must carry gradients only at keys the forward pass kept.
pub fn conv_backward(
    input: &SparseTensor,
    cfg: &ConvConfig,
    d_output: &SparseGradient,
    buffer: &mut DenseBuffer,
) -> Result<LayerGradients> {
    check_d_output(input, cfg, d_output)?;
    let plan = ConvPlan::new(input, &cfg.filter)?;
    let buf = buffer.prepare(plan.volume)?;
    let mut d_input = vec![0.0; input.nnz()];
    let mut d_filter = vec![0.0; cfg.filter.nnz()];
    let oc_count = cfg.filter.shape().out_channels();
    let mut d_bias = vec![0.0; oc_count];
    let mut mac_ops = 0;
    for b in 0..input.shape().batch() {
        for (oc, db) in d_bias.iter_mut().enumerate() {
            let (bias, macs) = backward_slab(&plan, d_output, b, oc, buf, &mut d_input, 0, &mut d_filter);
            *db += bias;
            mac_ops += macs;
        }
    }
    assemble(input, cfg, d_input, d_filter, d_bias, mac_ops)
}

/// Backward pass parallel over the batch. Each sample owns a disjoint slice
/// of the input gradient; filter and bias partials are reduced in batch order.
pub fn conv_backward_parallel(
    input: &SparseTensor,
    cfg: &ConvConfig,
    d_output: &SparseGradient,
) -> Result<LayerGradients> {
    check_d_output(input, cfg, d_output)?;
    let plan = ConvPlan::new(input, &cfg.filter)?;
    let shape = input.shape();
    let oc_count = cfg.filter.shape().out_channels();
    let per_sample = shape.len() / shape.batch() as u64;
    let partials: Vec<_> = (0..shape.batch())
        .into_par_iter()
        .map(|b| {
            let b64 = b as u64;
            let start = input.keys().partition_point(|&k| k < b64 * per_sample);
            let end = input.keys().partition_point(|&k| k < (b64 + 1) * per_sample);
            let mut buf = vec![0.0; plan.volume];
            let mut d_input = vec![0.0; end - start];
            let mut d_filter = vec![0.0; cfg.filter.nnz()];
            let mut d_bias = vec![0.0; oc_count];
            let mut macs = 0;
            for (oc, db) in d_bias.iter_mut().enumerate() {
                let (bias, m) =
                    backward_slab(&plan, d_output, b, oc, &mut buf, &mut d_input, start, &mut d_filter);
                *db += bias;
                macs += m;
            }
            (d_input, d_filter, d_bias, macs)
        })
        .collect();
    let mut d_input = Vec::with_capacity(input.nnz());
    let mut d_filter = vec![0.0; cfg.filter.nnz()];
    let mut d_bias = vec![0.0; oc_count];
    let mut mac_ops = 0;
    for (di, df, db, m) in partials {
        d_input.extend(di);
        for (acc, v) in d_filter.iter_mut().zip(df) {
            *acc += v;
        }
        for (acc, v) in d_bias.iter_mut().zip(db) {
            *acc += v;
        }
        mac_ops += m;
    }
    assemble(input, cfg, d_input, d_filter, d_bias, mac_ops)
}

fn assemble(
    input: &SparseTensor,
    cfg: &ConvConfig,
    d_input: Vec<Real>,
    d_filter: Vec<Real>,
    d_bias: Vec<Real>,
    mac_ops: u64,
) -> Result<LayerGradients> {
    Ok(LayerGradients {
        d_input: SparseGradient::from_parts_unchecked(input.shape().clone(), input.keys().to_vec(), d_input),
        d_filter: SparseFilter::from_sorted(cfg.filter.shape().clone(), cfg.filter.keys().to_vec(), d_filter)?,
        d_bias,
        mac_ops,
    })
}

/// Gradient through ReLU, aligned with the keys of the pre-activation tensor.
/// `d_output` may only hold keys whose pre-activation value is positive.
pub fn relu_backward(pre_activation: &SparseTensor, d_output: &SparseGradient) -> Result<SparseGradient> {
    if d_output.shape() != pre_activation.shape() {
        return Err(Error::ShapeMismatch("relu gradient shape".into()));
    }
    let mut values = vec![0.0; pre_activation.nnz()];
    let keys = pre_activation.keys();
    let mut p = 0;
    for (k, g) in d_output.iter() {
        p += keys[p..].partition_point(|&x| x < k);
        if p == keys.len() || keys[p] != k || pre_activation.values()[p] <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "gradient at key {k}, which did not survive the forward ReLU"
            )));
        }
        values[p] = g;
    }
    Ok(SparseGradient::from_parts_unchecked(
        pre_activation.shape().clone(),
        keys.to_vec(),
        values,
    ))
}

/// Routes pooled gradients to the argmax witness of each cluster; the result
/// is aligned with the pooled input's keys.
pub fn pool_backward(routing: &PoolRouting, d_output: &SparseGradient) -> Result<SparseGradient> {
    if routing.witness.len() != routing.output_keys.len() {
        return Err(Error::InvalidParameter("routing table is inconsistent".into()));
    }
    let mut values = vec![0.0; routing.input_keys.len()];
    let keys = &routing.output_keys;
    let mut p = 0;
    for (k, g) in d_output.iter() {
        p += keys[p..].partition_point(|&x| x < k);
        if p == keys.len() || keys[p] != k {
            return Err(Error::InvalidParameter(format!(
                "gradient at key {k}, which the pooling layer did not produce"
            )));
        }
        let w = routing.witness[p];
        if w >= values.len() {
            return Err(Error::InvalidParameter("routing witness out of range".into()));
        }
        values[w] += g;
    }
    Ok(SparseGradient::from_parts_unchecked(
        routing.input_shape.clone(),
        routing.input_keys.clone(),
        values,
    ))
}

/// Gradients of a fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    pub d_input: Vec<Real>,
    pub d_weights: Vec<Real>,
    pub d_bias: Vec<Real>,
}

/// Backward pass of [`crate::layers::fully_connected_forward`].
pub fn fc_backward(x: &[Real], weights: &[Real], d_output: &[Real]) -> Result<DenseGradients> {
    let mut d_weights = vec![0.0; weights.len()];
    let mut d_bias = vec![0.0; d_output.len()];
    let d_input = fc_backward_accumulate(x, weights, d_output, &mut d_weights, &mut d_bias)?;
    Ok(DenseGradients {
        d_input,
        d_weights,
        d_bias,
    })
}

/// Like [`fc_backward`] but adds the parameter gradients into existing
/// accumulators, which is what minibatch training needs.
pub fn fc_backward_accumulate(
    x: &[Real],
    weights: &[Real],
    d_output: &[Real],
    d_weights: &mut [Real],
    d_bias: &mut [Real],
) -> Result<Vec<Real>> {
    let n = x.len();
    if weights.len() != n * d_output.len() || d_weights.len() != weights.len() || d_bias.len() != d_output.len() {
        return Err(Error::ShapeMismatch("fully connected gradient dimensions".into()));
    }
    let mut d_input = vec![0.0; n];
    if n == 0 {
        for (acc, g) in d_bias.iter_mut().zip(d_output) {
            *acc += g;
        }
        return Ok(d_input);
    }
    for (o, &g) in d_output.iter().enumerate() {
        d_bias[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &weights[o * n..(o + 1) * n];
        let d_row = &mut d_weights[o * n..(o + 1) * n];
        for i in 0..n {
            d_input[i] += g * row[i];
            d_row[i] += g * x[i];
        }
    }
    Ok(d_input)
}

/// Gradient through dropout: the saved mask scales the incoming gradient.
pub fn dropout_backward(d_output: &[Real], mask: &[Real]) -> Result<Vec<Real>> {
    if d_output.len() != mask.len() {
        return Err(Error::ShapeMismatch("dropout mask length".into()));
    }
    Ok(d_output.iter().zip(mask).map(|(g, m)| g * m).collect())
}

/// Softmax cross-entropy loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[Real], label: usize) -> Result<(Real, Vec<Real>)> {
    if label >= logits.len() {
        return Err(Error::InvalidParameter(format!(
            "label {label} for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: Real = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<Real> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest logit, ties to the smaller class.
pub fn argmax(logits: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
