use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::argmax;
use crate::data::SparseDataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{ExecMode, Network};

use super::{apply_step, prune_network, RegularizerConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Pruning threshold on weight magnitude.
    pub epsilon: f64,
    pub regularizer: RegularizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidParameter("epsilon must be nonnegative".into()));
        }
        self.regularizer.validate()
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Mean measured density of each sparse conv over the epoch's batches.
    pub densities: Vec<f64>,
    /// Live weights in sparse convs after the epoch's pruning.
    pub weight_nnz: usize,
    /// Weights pruned at the end of this epoch.
    pub pruned: usize,
    /// Sparse convolution multiply-accumulates, forward and backward.
    pub mac_ops: u64,
    pub wall_ms: f64,
}

/// Shuffling and dropout draw from a stream keyed by the epoch number, so a
/// run resumed from a checkpoint continues exactly as an uninterrupted one.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Owns the network, the optimizer state and the data-order/dropout RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    pub state: TrainState,
    pub config: TrainConfig,
    pub exec: ExecMode,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(network: Network, config: TrainConfig, exec: ExecMode) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(&network, config.epsilon);
        Ok(Self::resume(network, state, config, exec))
    }

    /// Continues from saved state.
    pub fn resume(network: Network, state: TrainState, config: TrainConfig, exec: ExecMode) -> Self {
        let rng = epoch_rng(config.seed, state.epoch);
        Self {
            network,
            state,
            config,
            exec,
            rng,
        }
    }

    /// One pass over `data` in shuffled minibatches, followed by pruning.
    pub fn train_epoch(&mut self, data: &SparseDataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidParameter("empty training set".into()));
        }
        let start = Instant::now();
        self.rng = epoch_rng(self.config.seed, self.state.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let sparse_layers = self.network.sparse_conv_layers().len();
        let mut density_sum = vec![0.0; sparse_layers];
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut mac_ops = 0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let trace = self.network.forward(&x, Mode::Train, self.exec, &mut self.rng)?;
            let (loss, d_logits) = Network::loss(&trace, &labels)?;
            correct += trace
                .logits
                .iter()
                .zip(&labels)
                .filter(|(l, &y)| argmax(l) == y)
                .count();
            loss_sum += loss * labels.len() as f64;
            let grads = self.network.backward(&trace, d_logits, self.exec)?;
            mac_ops += trace.mac_ops + grads.mac_ops;
            for (acc, &d) in density_sum.iter_mut().zip(&trace.densities) {
                *acc += d;
            }
            self.state.measured_density = trace.densities.clone();
            apply_step(
                &mut self.network,
                &mut self.state,
                &grads.layers,
                &trace.densities,
                &self.config.regularizer,
                self.config.learning_rate,
            )?;
            batches += 1;
        }
        let pruned = prune_network(&mut self.network, &mut self.state);
        self.state.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.state.epoch,
            train_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            densities: density_sum.iter().map(|d| d / batches as f64).collect(),
            weight_nnz: self.network.sparse_weight_count(),
            pruned,
            mac_ops,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Test-set accuracy with per-class tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Evaluates `network` on `data` in inference mode.
pub fn evaluate(network: &Network, data: &SparseDataset, batch_size: usize, exec: ExecMode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation set".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let mut per_class = vec![(0, 0); data.classes()];
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size) {
        let (x, labels) = data.batch(chunk)?;
        let predicted = network.predict(&x, exec)?;
        for (p, y) in predicted.into_iter().zip(labels) {
            per_class[y].1 += 1;
            if p == y {
                per_class[y].0 += 1;
            }
        }
    }
    Ok(EvalReport {
        correct: per_class.iter().map(|c| c.0).sum(),
        total: data.len(),
        per_class,
    })
}
