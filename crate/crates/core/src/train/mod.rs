//! Density-steering regularization, Adagrad and two-strike pruning.

mod epoch;

pub use epoch::{evaluate, EpochMetrics, EvalReport, TrainConfig, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, Network};
use crate::tensor::SparseFilter;
use crate::Real;

/// Numerical floor in the Adagrad denominator.
pub const ADAGRAD_EPS: Real = 1e-8;

/// Scale and shape of the density-steering L2 penalty `lambda * sum (w + b)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda: f64,
    /// Offset added when the layer is over budget.
    pub o: f64,
    /// Slope above the bound.
    pub b1: f64,
    /// Slope below the bound.
    pub b2: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            o: 0.1,
            b1: 0.1,
            b2: 0.1,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.o, self.b1, self.b2]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidParameter(
                "regularizer lambda, o, b1 and b2 must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Shift `b` of the penalty: positive when the measured density `rho`
/// exceeds `rho_up`, negative when it falls short.
pub fn density_bias(rho: f64, rho_up: f64, cfg: &RegularizerConfig) -> Real {
    if rho > rho_up {
        cfg.o + cfg.b1 * (rho - rho_up)
    } else {
        -cfg.b2 * (rho_up - rho)
    }
}

/// Derivative of `lambda * (w + b)^2` with respect to `w`.
pub fn regularizer_grad(w: Real, b: Real, lambda: f64) -> Real {
    2.0 * lambda * (w + b)
}

pub fn adagrad_step(param: &mut Real, grad: Real, acc: &mut Real, lr: f64) {
    *acc += grad * grad;
    *param -= lr * grad / (acc.sqrt() + ADAGRAD_EPS);
}

/// Optimizer and pruning state of one parameterized layer.
///
/// For sparse convolutions the weight arrays are indexed by filter key, so
/// the state of a pruned weight stays in place, frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub weight_acc: Vec<Real>,
    pub bias_acc: Vec<Real>,
    /// Sticky prune flags (sparse convolutions only).
    pub pruned: Vec<bool>,
    /// Set when the weight was below epsilon at the previous epoch end.
    pub warned: Vec<bool>,
}

/// Everything the optimizer carries across steps and epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// One entry per network layer, `None` for parameter-free layers.
    pub layers: Vec<Option<LayerState>>,
    pub epsilon: f64,
    /// Most recent output density of every sparse conv.
    pub measured_density: Vec<f64>,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(network: &Network, epsilon: f64) -> Self {
        let layers = network
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::SparseConv(cfg) => {
                    let slots = cfg.filter.shape().len();
                    let mut pruned = vec![true; slots];
                    for &k in cfg.filter.keys() {
                        pruned[k as usize] = false;
                    }
                    Some(LayerState {
                        weight_acc: vec![0.0; slots],
                        bias_acc: vec![0.0; cfg.bias.len()],
                        pruned,
                        warned: vec![false; slots],
                    })
                }
                other => other.params().map(|(w, b)| LayerState {
                    weight_acc: vec![0.0; w.len()],
                    bias_acc: vec![0.0; b.len()],
                    pruned: Vec::new(),
                    warned: Vec::new(),
                }),
            })
            .collect();
        Self {
            layers,
            epsilon,
            measured_density: vec![0.0; network.sparse_conv_layers().len()],
            epoch: 0,
        }
    }

    /// Total number of pruned weights.
    pub fn pruned_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|l| l.pruned.iter().filter(|&&p| p).count())
            .sum()
    }
}

/// End-of-epoch pruning: a live weight below `epsilon` at two consecutive
/// epoch ends is removed for good. Returns the number of weights removed.
pub fn prune_epoch_end(filter: &mut SparseFilter, state: &mut LayerState, epsilon: f64) -> usize {
    let mut removed = 0;
    for (&k, &w) in filter.keys().iter().zip(filter.values()) {
        let k = k as usize;
        if state.pruned[k] {
            continue;
        }
        if w.abs() < epsilon {
            if state.warned[k] {
                state.pruned[k] = true;
                removed += 1;
            } else {
                state.warned[k] = true;
            }
        } else {
            state.warned[k] = false;
        }
    }
    if removed > 0 {
        let pruned = &state.pruned;
        filter.retain(|k, _| !pruned[k as usize]);
    }
    removed
}

/// One optimizer step over all parameters.
///
/// `grads[i]` holds (weight, bias) gradients of layer `i`; for sparse
/// convolutions they are aligned with the live filter entries. `densities`
/// are the measured output densities of the sparse convs in layer order.
pub fn apply_step(
    network: &mut Network,
    state: &mut TrainState,
    grads: &[Option<(Vec<Real>, Vec<Real>)>],
    densities: &[f64],
    reg: &RegularizerConfig,
    lr: f64,
) -> Result<()> {
    let mut sparse_index = 0;
    for ((layer, ls), g) in network.layers.iter_mut().zip(&mut state.layers).zip(grads) {
        let (Some(ls), Some((gw, gb))) = (ls.as_mut(), g.as_ref()) else {
            continue;
        };
        match layer {
            Layer::SparseConv(cfg) => {
                let rho = densities.get(sparse_index).copied().unwrap_or(0.0);
                sparse_index += 1;
                let b = density_bias(rho, cfg.rho_up.target(), reg);
                if gw.len() != cfg.filter.nnz() || gb.len() != cfg.bias.len() {
                    return Err(Error::ShapeMismatch("gradient not aligned with the filter".into()));
                }
                let keys = cfg.filter.keys().to_vec();
                for ((w, &g), k) in cfg.filter.values_mut().iter_mut().zip(gw).zip(keys) {
                    let g = g + regularizer_grad(*w, b, reg.lambda);
                    adagrad_step(w, g, &mut ls.weight_acc[k as usize], lr);
                }
                for ((w, &g), acc) in cfg.bias.iter_mut().zip(gb).zip(&mut ls.bias_acc) {
                    let g = g + regularizer_grad(*w, b, reg.lambda);
                    adagrad_step(w, g, acc, lr);
                }
            }
            other => {
                let (w, bias) = other.params_mut().expect("state exists only for parameterized layers");
                if gw.len() != w.len() || gb.len() != bias.len() {
                    return Err(Error::ShapeMismatch("gradient length differs from parameters".into()));
                }
                for ((w, &g), acc) in w.iter_mut().zip(gw).zip(&mut ls.weight_acc) {
                    adagrad_step(w, g, acc, lr);
                }
                for ((w, &g), acc) in bias.iter_mut().zip(gb).zip(&mut ls.bias_acc) {
                    adagrad_step(w, g, acc, lr);
                }
            }
        }
    }
    Ok(())
}

/// Prunes every sparse conv of the network; returns the number removed.
pub fn prune_network(network: &mut Network, state: &mut TrainState) -> usize {
    let eps = state.epsilon;
    network
        .layers
        .iter_mut()
        .zip(&mut state.layers)
        .map(|(layer, ls)| match (layer, ls) {
            (Layer::SparseConv(cfg), Some(ls)) => prune_epoch_end(&mut cfg.filter, ls, eps),
            _ => 0,
        })
        .sum()
}
