//! Architecture descriptions, the OctNet3 family builders and a network
//! executor with forward tracing and masked backward passes.
//!
//! Every convolution and every fully connected layer except the last is
//! followed by a ReLU. Layers before the single `SparseToDense` bridge run on
//! sparse tensors; convolutions and pooling after it run densely.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionVariant, DensityBound};
use crate::backprop::{
    conv_backward, conv_backward_parallel, dropout_backward, fc_backward_accumulate, pool_backward,
    relu_backward, softmax_cross_entropy,
};
use crate::conv::{sparse_conv_forward, sparse_conv_forward_parallel, ConvConfig, DenseBuffer};
use crate::error::{Error, Result};
use crate::layers::{
    dropout_forward, fully_connected_forward, sparse_max_pool, sparse_relu, Mode, PoolConfig, PoolRouting,
};
use crate::oracle::{dense_conv_backward, dense_conv_forward, dense_max_pool, dense_max_pool_backward};
use crate::tensor::{
    DenseFilter, DenseTensor, FilterShape, SparseFilter, SparseGradient, SparseTensor, TensorShape,
};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Sparse when `rho_up` is present (before the bridge), dense otherwise.
    Conv {
        in_channels: usize,
        out_channels: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_up: Option<DensityBound>,
    },
    MaxPool {
        stride: usize,
    },
    SparseToDense,
    Dropout {
        rate: f64,
    },
    FullyConnected {
        width: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                rho_up: Some(rho),
            } => write!(f, "conv({in_channels}, {out_channels}, {rho})"),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                rho_up: None,
            } => write!(f, "conv({in_channels}, {out_channels})"),
            LayerSpec::MaxPool { stride } => write!(f, "maxPooling({stride})"),
            LayerSpec::SparseToDense => write!(f, "sparseToDense()"),
            LayerSpec::Dropout { rate } => write!(f, "dropout({rate})"),
            LayerSpec::FullyConnected { width } => write!(f, "fully-connected({width})"),
        }
    }
}

/// A complete network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_spatial: Vec<usize>,
    pub input_channels: usize,
    pub classes: usize,
    /// Odd kernel extent used in every spatial dimension of every conv.
    pub kernel: usize,
    #[serde(default)]
    pub attention: AttentionVariant,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Checks channel chaining, bridge placement and the classifier width.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.kernel % 2 == 0 {
            return bad(format!("kernel extent {} is not odd", self.kernel));
        }
        TensorShape::new(1, self.input_spatial.clone(), self.input_channels.max(1))?;
        let mut channels = self.input_channels;
        let mut features: Option<usize> = None;
        let mut dense = false;
        let mut bridges = 0;
        let mut spatial = self.input_spatial.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    rho_up,
                } => {
                    if features.is_some() {
                        return bad(format!("layer {i}: conv after the classifier head started"));
                    }
                    if in_channels != channels {
                        return bad(format!(
                            "layer {i}: conv expects {in_channels} channels but receives {channels}"
                        ));
                    }
                    if out_channels == 0 {
                        return bad(format!("layer {i}: conv with zero output channels"));
                    }
                    if rho_up.is_some() == dense {
                        return bad(format!(
                            "layer {i}: convs carry a density bound exactly when they precede sparseToDense"
                        ));
                    }
                    if let Some(DensityBound::Bounded(r)) = rho_up {
                        DensityBound::bounded(r)?;
                    }
                    channels = out_channels;
                }
                LayerSpec::MaxPool { stride } => {
                    if stride == 0 || features.is_some() {
                        return bad(format!("layer {i}: invalid pooling"));
                    }
                    spatial = spatial.iter().map(|s| s.div_ceil(stride)).collect();
                }
                LayerSpec::SparseToDense => {
                    bridges += 1;
                    dense = true;
                }
                LayerSpec::Dropout { rate } => {
                    if !dense || !(0.0..1.0).contains(&rate) {
                        return bad(format!("layer {i}: dropout needs the dense stage and a rate in [0, 1)"));
                    }
                    features.get_or_insert(channels * spatial.iter().product::<usize>());
                }
                LayerSpec::FullyConnected { width } => {
                    if !dense || width == 0 {
                        return bad(format!("layer {i}: fully-connected needs the dense stage"));
                    }
                    features = Some(width);
                }
            }
        }
        if bridges != 1 {
            return bad(format!("{bridges} sparseToDense layers, expected exactly one"));
        }
        match self.layers.last() {
            Some(LayerSpec::FullyConnected { width }) if *width == self.classes => Ok(()),
            _ => bad(format!("network must end in fully-connected({})", self.classes)),
        }
    }

    /// Density bounds of the sparse convolutions, in order.
    pub fn sparse_bounds(&self) -> Vec<DensityBound> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { rho_up, .. } => *rho_up,
                _ => None,
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        format!("{}: {}", self.name, layers.join(" "))
    }
}

/// Members of the OctNet3 family, named by input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Cube16,
    Square24,
    Cube32,
    Cube64,
    Cube128,
    Cube256,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cube16,
        Variant::Square24,
        Variant::Cube32,
        Variant::Cube64,
        Variant::Cube128,
        Variant::Cube256,
    ];

    pub fn input_spatial(self) -> Vec<usize> {
        match self {
            Variant::Cube16 => vec![16; 3],
            Variant::Square24 => vec![24; 2],
            Variant::Cube32 => vec![32; 3],
            Variant::Cube64 => vec![64; 3],
            Variant::Cube128 => vec![128; 3],
            Variant::Cube256 => vec![256; 3],
        }
    }

    /// Number of three-conv blocks.
    fn blocks(self) -> usize {
        match self {
            Variant::Cube16 | Variant::Square24 => 2,
            Variant::Cube32 => 3,
            Variant::Cube64 => 4,
            Variant::Cube128 => 5,
            Variant::Cube256 => 6,
        }
    }

    /// Number of blocks that run sparse, each with its own density bound.
    pub fn sparse_blocks(self) -> usize {
        self.blocks().min(3)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.input_spatial();
        write!(f, "{}^{}", s[0], s.len())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches("octnet3-").trim_start_matches("OctNet3-");
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == t)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant {s:?}; expected one of 16^3, 24^2, 32^3, 64^3, 128^3, 256^3")))
    }
}

const BLOCK_WIDTHS: [usize; 6] = [8, 16, 24, 32, 40, 48];

/// OctNet3 layer sequence for `variant`.
///
/// `rhos` holds one bound per sparse block. For the 24^2 variant a single
/// bound `r` is also accepted and expands to `[r, 2r]`.
pub fn build_octnet3(variant: Variant, rhos: &[DensityBound], classes: usize) -> Result<ArchitectureSpec> {
    let sparse = variant.sparse_blocks();
    let rhos: Vec<DensityBound> = match (variant, rhos) {
        (Variant::Square24, [r]) => vec![*r, double(*r)?],
        _ => rhos.to_vec(),
    };
    if rhos.len() != sparse {
        return Err(Error::InvalidParameter(format!(
            "variant {variant} has {sparse} sparse blocks but {} density bounds were given",
            rhos.len()
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidParameter("class count must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut channels = 1;
    for block in 0..variant.blocks() {
        if block > 0 {
            layers.push(LayerSpec::MaxPool { stride: 2 });
        }
        let width = BLOCK_WIDTHS[block];
        let rho_up = rhos.get(block).copied();
        for _ in 0..3 {
            layers.push(LayerSpec::Conv {
                in_channels: channels,
                out_channels: width,
                rho_up,
            });
            channels = width;
        }
        if block + 1 == sparse {
            layers.push(LayerSpec::SparseToDense);
        }
    }
    layers.push(LayerSpec::Dropout { rate: 0.5 });
    layers.push(LayerSpec::FullyConnected { width: 1024 });
    layers.push(LayerSpec::FullyConnected { width: classes });
    let spec = ArchitectureSpec {
        name: format!("octnet3-{variant}"),
        input_spatial: variant.input_spatial(),
        input_channels: 1,
        classes,
        kernel: 3,
        attention: AttentionVariant::Raw,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

fn double(r: DensityBound) -> Result<DensityBound> {
    match r {
        DensityBound::Unbounded => Ok(DensityBound::Unbounded),
        DensityBound::Bounded(v) => DensityBound::bounded((2.0 * v).min(1.0)),
    }
}

/// Selects the sequential or the parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Sequential,
    Parallel,
}

/// A layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    SparseConv(ConvConfig),
    SparsePool(PoolConfig),
    ToDense,
    DenseConv { filter: DenseFilter, bias: Vec<Real> },
    DensePool { strides: Vec<usize> },
    Dropout { rate: f64 },
    Fc { weights: Vec<Real>, bias: Vec<Real>, relu: bool },
}

impl Layer {
    /// Mutable views of (weights, bias) for layers that have parameters.
    pub fn params_mut(&mut self) -> Option<(&mut [Real], &mut [Real])> {
        match self {
            Layer::SparseConv(cfg) => Some((cfg.filter.values_mut(), &mut cfg.bias)),
            Layer::DenseConv { filter, bias } => Some((filter.values_mut(), bias)),
            Layer::Fc { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&[Real], &[Real])> {
        match self {
            Layer::SparseConv(cfg) => Some((cfg.filter.values(), &cfg.bias)),
            Layer::DenseConv { filter, bias } => Some((filter.values(), bias)),
            Layer::Fc { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }
}

/// An executable network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ArchitectureSpec,
    pub layers: Vec<Layer>,
}

/// Activations of a minibatch as they flow through the stages.
#[derive(Debug, Clone)]
enum Act {
    Sparse(SparseTensor),
    Dense(DenseTensor),
    Flat(Vec<Vec<Real>>),
}

/// Gradients flowing backward, mirroring [`Act`].
enum Grad {
    Sparse(SparseGradient),
    Dense(DenseTensor),
    Flat(Vec<Vec<Real>>),
}

#[derive(Debug, Clone)]
enum Cache {
    SparseConv { input: SparseTensor, pre: SparseTensor },
    SparsePool(PoolRouting),
    ToDense { input: SparseTensor },
    DenseConv { input: DenseTensor, pre: DenseTensor },
    DensePool { input_shape: TensorShape, argmax: Vec<usize> },
    Flatten { shape: TensorShape },
    Dropout { masks: Vec<Vec<Real>> },
    Fc { input: Vec<Vec<Real>>, pre: Vec<Vec<Real>> },
}

/// What a training forward pass leaves behind for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per sample, one logit per class.
    pub logits: Vec<Vec<Real>>,
    /// Output density of every sparse conv (after attention, before ReLU).
    pub densities: Vec<f64>,
    /// Sparse convolution multiply-accumulates of this pass.
    pub mac_ops: u64,
    caches: Vec<(usize, Cache)>,
}

/// Parameter gradients, one entry per layer (`None` for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<(Vec<Real>, Vec<Real>)>>,
    pub mac_ops: u64,
}

impl Network {
    /// Builds parameters with He-normal weights and zero biases.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = spec.input_spatial.len();
        let mut spatial = spec.input_spatial.clone();
        let mut channels = spec.input_channels;
        let mut features = 0;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let fc_count = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::FullyConnected { .. }))
            .count();
        let mut fc_seen = 0;
        let mut dense = false;
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    rho_up,
                } => {
                    let fshape = FilterShape::cube(spec.kernel, rank, in_channels, out_channels)?;
                    let std = (2.0 / (in_channels * fshape.kernel_volume()) as f64).sqrt();
                    let values = normal_values(&mut rng, fshape.len(), std);
                    let bias = vec![0.0; out_channels];
                    match rho_up {
                        Some(bound) => {
                            let filter = SparseFilter::from_dense(&DenseFilter::new(fshape, values)?);
                            layers.push(Layer::SparseConv(
                                ConvConfig::new(filter)
                                    .with_bias(bias)
                                    .with_bound(bound, spec.attention),
                            ));
                        }
                        None => layers.push(Layer::DenseConv {
                            filter: DenseFilter::new(fshape, values)?,
                            bias,
                        }),
                    }
                    channels = out_channels;
                }
                LayerSpec::MaxPool { stride } => {
                    spatial = spatial.iter().map(|s| s.div_ceil(stride)).collect();
                    layers.push(if dense {
                        Layer::DensePool {
                            strides: vec![stride; rank],
                        }
                    } else {
                        Layer::SparsePool(PoolConfig::uniform(stride, rank))
                    });
                }
                LayerSpec::SparseToDense => {
                    dense = true;
                    layers.push(Layer::ToDense);
                }
                LayerSpec::Dropout { rate } => {
                    if features == 0 {
                        features = channels * spatial.iter().product::<usize>();
                    }
                    layers.push(Layer::Dropout { rate });
                }
                LayerSpec::FullyConnected { width } => {
                    if features == 0 {
                        features = channels * spatial.iter().product::<usize>();
                    }
                    fc_seen += 1;
                    let std = (2.0 / features as f64).sqrt();
                    layers.push(Layer::Fc {
                        weights: normal_values(&mut rng, features * width, std),
                        bias: vec![0.0; width],
                        relu: fc_seen < fc_count,
                    });
                    features = width;
                }
            }
        }
        Ok(Self { spec, layers })
    }

    /// Indices of the sparse convolution layers.
    pub fn sparse_conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::SparseConv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Live weights across all sparse convolutions.
    pub fn sparse_weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::SparseConv(cfg) => cfg.filter.nnz(),
                _ => 0,
            })
            .sum()
    }

    /// Expected input shape for a minibatch of `batch` samples.
    pub fn input_shape(&self, batch: usize) -> Result<TensorShape> {
        TensorShape::new(batch, self.spec.input_spatial.clone(), self.spec.input_channels)
    }

    /// Runs a minibatch forward. In `Mode::Train` dropout draws from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &SparseTensor,
        mode: Mode,
        exec: ExecMode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let batch = input.shape().batch();
        if input.shape() != &self.input_shape(batch)? {
            return Err(Error::ShapeMismatch(format!(
                "network expects spatial {:?} with {} channels",
                self.spec.input_spatial, self.spec.input_channels
            )));
        }
        let mut buffer = DenseBuffer::for_shape(input.shape());
        let mut act = Act::Sparse(input.clone());
        let mut caches = Vec::new();
        let mut densities = Vec::new();
        let mut mac_ops = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            act = match (layer, act) {
                (Layer::SparseConv(cfg), Act::Sparse(x)) => {
                    let out = match exec {
                        ExecMode::Sequential => sparse_conv_forward(&x, cfg, &mut buffer)?,
                        ExecMode::Parallel => sparse_conv_forward_parallel(&x, cfg)?,
                    };
                    mac_ops += out.mac_ops;
                    densities.push(out.output.density());
                    let y = sparse_relu(&out.output);
                    caches.push((
                        i,
                        Cache::SparseConv {
                            input: x,
                            pre: out.output,
                        },
                    ));
                    Act::Sparse(y)
                }
                (Layer::SparsePool(cfg), Act::Sparse(x)) => {
                    let (y, routing) = sparse_max_pool(&x, cfg)?;
                    caches.push((i, Cache::SparsePool(routing)));
                    Act::Sparse(y)
                }
                (Layer::ToDense, Act::Sparse(x)) => {
                    let y = x.to_dense();
                    caches.push((i, Cache::ToDense { input: x }));
                    Act::Dense(y)
                }
                (Layer::DenseConv { filter, bias }, Act::Dense(x)) => {
                    let pre = dense_conv_forward(&x, filter, bias)?;
                    let y = crate::oracle::dense_relu(&pre);
                    caches.push((i, Cache::DenseConv { input: x, pre }));
                    Act::Dense(y)
                }
                (Layer::DensePool { strides }, Act::Dense(x)) => {
                    let (y, argmax) = dense_max_pool(&x, strides)?;
                    caches.push((
                        i,
                        Cache::DensePool {
                            input_shape: x.shape().clone(),
                            argmax,
                        },
                    ));
                    Act::Dense(y)
                }
                (layer @ (Layer::Dropout { .. } | Layer::Fc { .. }), Act::Dense(x)) => {
                    caches.push((i, Cache::Flatten { shape: x.shape().clone() }));
                    let flat = (0..batch).map(|b| x.sample(b).to_vec()).collect();
                    self.flat_layer(i, layer, flat, mode, rng, &mut caches)?
                }
                (layer @ (Layer::Dropout { .. } | Layer::Fc { .. }), Act::Flat(x)) => {
                    self.flat_layer(i, layer, x, mode, rng, &mut caches)?
                }
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "layer {i} received activations of the wrong kind"
                    )))
                }
            };
        }
        match act {
            Act::Flat(logits) => Ok(ForwardTrace {
                logits,
                densities,
                mac_ops,
                caches,
            }),
            _ => Err(Error::InvalidParameter("network did not end in a dense head".into())),
        }
    }

    fn flat_layer<R: Rng + ?Sized>(
        &self,
        i: usize,
        layer: &Layer,
        x: Vec<Vec<Real>>,
        mode: Mode,
        rng: &mut R,
        caches: &mut Vec<(usize, Cache)>,
    ) -> Result<Act> {
        match layer {
            Layer::Dropout { rate } => {
                let mut out = Vec::with_capacity(x.len());
                let mut masks = Vec::with_capacity(x.len());
                for v in &x {
                    let (y, m) = dropout_forward(v, *rate, mode, rng)?;
                    out.push(y);
                    masks.push(m);
                }
                caches.push((i, Cache::Dropout { masks }));
                Ok(Act::Flat(out))
            }
            Layer::Fc { weights, bias, relu } => {
                let pre = x
                    .iter()
                    .map(|v| fully_connected_forward(v, weights, bias))
                    .collect::<Result<Vec<_>>>()?;
                let out = if *relu {
                    pre.iter().map(|v| v.iter().map(|&a| a.max(0.0)).collect()).collect()
                } else {
                    pre.clone()
                };
                caches.push((i, Cache::Fc { input: x, pre }));
                Ok(Act::Flat(out))
            }
            _ => unreachable!("only dense head layers reach flat_layer"),
        }
    }

    /// Mean softmax cross-entropy over the batch and its logit gradients
    /// (already divided by the batch size).
    pub fn loss(trace: &ForwardTrace, labels: &[usize]) -> Result<(Real, Vec<Vec<Real>>)> {
        if labels.len() != trace.logits.len() {
            return Err(Error::ShapeMismatch("one label per sample required".into()));
        }
        let n = labels.len() as Real;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(labels.len());
        for (logits, &label) in trace.logits.iter().zip(labels) {
            let (l, mut g) = softmax_cross_entropy(logits, label)?;
            total += l;
            g.iter_mut().for_each(|v| *v /= n);
            grads.push(g);
        }
        Ok((total / n, grads))
    }

    /// Backward pass through a trace produced by [`Network::forward`].
    pub fn backward(&self, trace: &ForwardTrace, d_logits: Vec<Vec<Real>>, exec: ExecMode) -> Result<Gradients> {
        let mut grads: Vec<Option<(Vec<Real>, Vec<Real>)>> = vec![None; self.layers.len()];
        let mut mac_ops = 0;
        let mut g = Grad::Flat(d_logits);
        let mut buffer: Option<DenseBuffer> = None;
        for (i, cache) in trace.caches.iter().rev() {
            let i = *i;
            g = match (cache, g) {
                (Cache::Fc { input, pre }, Grad::Flat(d)) => {
                    let Layer::Fc { weights, bias, relu } = &self.layers[i] else {
                        unreachable!("cache kinds follow layer kinds")
                    };
                    let mut dw = vec![0.0; weights.len()];
                    let mut db = vec![0.0; bias.len()];
                    let mut d_in = Vec::with_capacity(d.len());
                    for ((x, p), mut dy) in input.iter().zip(pre).zip(d) {
                        if *relu {
                            for (g, &a) in dy.iter_mut().zip(p) {
                                if a <= 0.0 {
                                    *g = 0.0;
                                }
                            }
                        }
                        d_in.push(fc_backward_accumulate(x, weights, &dy, &mut dw, &mut db)?);
                    }
                    grads[i] = Some((dw, db));
                    Grad::Flat(d_in)
                }
                (Cache::Dropout { masks }, Grad::Flat(d)) => Grad::Flat(
                    d.iter()
                        .zip(masks)
                        .map(|(g, m)| dropout_backward(g, m))
                        .collect::<Result<_>>()?,
                ),
                (Cache::Flatten { shape }, Grad::Flat(d)) => Grad::Dense(DenseTensor::new(shape.clone(), d.concat())?),
                (Cache::DensePool { input_shape, argmax }, Grad::Dense(d)) => {
                    Grad::Dense(dense_max_pool_backward(input_shape, argmax, &d)?)
                }
                (Cache::DenseConv { input, pre }, Grad::Dense(mut d)) => {
                    let Layer::DenseConv { filter, .. } = &self.layers[i] else {
                        unreachable!("cache kinds follow layer kinds")
                    };
                    for (g, &a) in d.values_mut().iter_mut().zip(pre.values()) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    let (dx, dw, db) = dense_conv_backward(input, filter, &d)?;
                    grads[i] = Some((dw.values().to_vec(), db));
                    Grad::Dense(dx)
                }
                (Cache::ToDense { input }, Grad::Dense(d)) => {
                    let values = input.keys().iter().map(|&k| d.values()[k as usize]).collect();
                    Grad::Sparse(SparseGradient::new(input.shape().clone(), input.keys().to_vec(), values)?)
                }
                (Cache::SparsePool(routing), Grad::Sparse(d)) => {
                    Grad::Sparse(pool_backward(routing, &d)?)
                }
                (Cache::SparseConv { input, pre }, Grad::Sparse(d)) => {
                    let Layer::SparseConv(cfg) = &self.layers[i] else {
                        unreachable!("cache kinds follow layer kinds")
                    };
                    let d_pre = relu_backward(pre, &d)?;
                    let lg = match exec {
                        ExecMode::Sequential => {
                            let buf = buffer.get_or_insert_with(|| DenseBuffer::for_shape(input.shape()));
                            if buf.len() < input.shape().spatial_volume() {
                                *buf = DenseBuffer::for_shape(input.shape());
                            }
                            conv_backward(input, cfg, &d_pre, buf)?
                        }
                        ExecMode::Parallel => conv_backward_parallel(input, cfg, &d_pre)?,
                    };
                    mac_ops += lg.mac_ops;
                    grads[i] = Some((lg.d_filter.values().to_vec(), lg.d_bias));
                    Grad::Sparse(lg.d_input)
                }
                _ => return Err(Error::InvalidParameter(format!("gradient of the wrong kind at layer {i}"))),
            };
        }
        Ok(Gradients {
            layers: grads,
            mac_ops,
        })
    }

    /// Predicted class per sample in evaluation mode.
    pub fn predict(&self, input: &SparseTensor, exec: ExecMode) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.forward(input, Mode::Eval, exec, &mut rng)?;
        Ok(trace.logits.iter().map(|l| crate::backprop::argmax(l)).collect())
    }
}

fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<Real> {
    let dist = Normal::new(0.0, std).expect("positive standard deviation");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v != 0.0 {
                break v;
            }
        })
        .collect()
}
