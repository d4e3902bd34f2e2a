//! Training checkpoints: architecture, parameters and optimizer state.
//!
//! The file uses the same framing as [`crate::container`]: a magic line, a
//! TOML header listing the binary sections in order, then the sections.
//! Filter keys are 64-bit little-endian, reals are little-endian f64 and flag
//! arrays are bitmaps (least significant bit first).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{frame, header_error, push_keys, push_reals, unframe, Reader};
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Layer, Network};
use crate::tensor::{IndexWidth, SparseFilter};
use crate::train::{LayerState, RegularizerConfig, TrainConfig, TrainState};
use crate::Real;

pub const CHECKPOINT_MAGIC: &str = "sparsenet checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONTEXT: &str = "checkpoint";

/// A network together with the state needed to resume or evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub state: TrainState,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SectionKind {
    Keys,
    Reals,
    Bits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Section {
    layer: usize,
    name: String,
    kind: SectionKind,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    epoch: usize,
    epsilon: f64,
    regularizer: RegularizerConfig,
    learning_rate: f64,
    batch_size: usize,
    /// Decimal string: TOML integers cannot hold every `u64`.
    seed: String,
    measured_density: Vec<f64>,
    architecture: ArchitectureSpec,
    sections: Vec<Section>,
}

enum Data<'a> {
    Keys(&'a [u64]),
    Reals(&'a [Real]),
    Bits(&'a [bool]),
}

fn bitmap(flags: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; flags.len().div_ceil(8)];
    for (i, &f) in flags.iter().enumerate() {
        if f {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unbitmap(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

fn add<'a>(sections: &mut Vec<Section>, data: &mut Vec<Data<'a>>, layer: usize, name: &str, d: Data<'a>) {
    let (kind, count) = match &d {
        Data::Keys(k) => (SectionKind::Keys, k.len()),
        Data::Reals(r) => (SectionKind::Reals, r.len()),
        Data::Bits(b) => (SectionKind::Bits, b.len()),
    };
    sections.push(Section {
        layer,
        name: name.into(),
        kind,
        count,
    });
    data.push(d);
}

pub fn encode_checkpoint(cp: &Checkpoint) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut data: Vec<Data> = Vec::new();
    for (i, (layer, ls)) in cp.network.layers.iter().zip(&cp.state.layers).enumerate() {
        if let Layer::SparseConv(cfg) = layer {
            add(&mut sections, &mut data, i, "filter_keys", Data::Keys(cfg.filter.keys()));
        }
        if let Some((w, b)) = layer.params() {
            add(&mut sections, &mut data, i, "weights", Data::Reals(w));
            add(&mut sections, &mut data, i, "bias", Data::Reals(b));
        }
        if let Some(ls) = ls {
            add(&mut sections, &mut data, i, "weight_acc", Data::Reals(&ls.weight_acc));
            add(&mut sections, &mut data, i, "bias_acc", Data::Reals(&ls.bias_acc));
            add(&mut sections, &mut data, i, "pruned", Data::Bits(&ls.pruned));
            add(&mut sections, &mut data, i, "warned", Data::Bits(&ls.warned));
        }
    }
    let header = Header {
        epoch: cp.state.epoch,
        epsilon: cp.state.epsilon,
        regularizer: cp.config.regularizer,
        learning_rate: cp.config.learning_rate,
        batch_size: cp.config.batch_size,
        seed: cp.config.seed.to_string(),
        measured_density: cp.state.measured_density.clone(),
        architecture: cp.network.spec.clone(),
        sections,
    };
    let text = toml::to_string(&header).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut payload = Vec::new();
    for d in data {
        match d {
            Data::Keys(k) => push_keys(&mut payload, k, IndexWidth::Bits64),
            Data::Reals(r) => push_reals(&mut payload, r),
            Data::Bits(b) => payload.extend_from_slice(&bitmap(b)),
        }
    }
    Ok(frame(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &text, &payload))
}

/// Sections of one layer, looked up by name.
struct LayerSections {
    keys: Option<Vec<u64>>,
    reals: Vec<(String, Vec<Real>)>,
    bits: Vec<(String, Vec<bool>)>,
}

impl LayerSections {
    fn real(&mut self, name: &str, offset: usize) -> Result<Vec<Real>> {
        take_named(&mut self.reals, name, offset)
    }

    fn bits(&mut self, name: &str, offset: usize) -> Result<Vec<bool>> {
        take_named(&mut self.bits, name, offset)
    }
}

fn take_named<T>(items: &mut Vec<(String, T)>, name: &str, offset: usize) -> Result<T> {
    let p = items
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::format(CONTEXT, offset as u64, format!("missing section {name}")))?;
    Ok(items.swap_remove(p).1)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (text, payload) = unframe(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CONTEXT)?;
    let header_start = payload - text.len();
    let h: Header = toml::from_str(text).map_err(|e| header_error(CONTEXT, header_start, e))?;
    let seed = h
        .seed
        .parse()
        .map_err(|_| Error::format(CONTEXT, header_start as u64, format!("bad seed {:?}", h.seed)))?;
    let bad_header = |e: Error| Error::format(CONTEXT, header_start as u64, e.to_string());
    let mut network = Network::new(h.architecture, 0).map_err(bad_header)?;

    let n = network.layers.len();
    let mut per_layer: Vec<LayerSections> = (0..n)
        .map(|_| LayerSections {
            keys: None,
            reals: Vec::new(),
            bits: Vec::new(),
        })
        .collect();
    let mut r = Reader::new(bytes, payload, CONTEXT);
    for s in &h.sections {
        let slot = per_layer
            .get_mut(s.layer)
            .ok_or_else(|| Error::format(CONTEXT, header_start as u64, format!("section for missing layer {}", s.layer)))?;
        match s.kind {
            SectionKind::Keys => slot.keys = Some(r.keys(s.count, IndexWidth::Bits64, &s.name)?),
            SectionKind::Reals => slot.reals.push((s.name.clone(), r.reals(s.count, &s.name)?)),
            SectionKind::Bits => {
                let raw = r.take(s.count.div_ceil(8), &s.name)?;
                slot.bits.push((s.name.clone(), unbitmap(raw, s.count)));
            }
        }
    }
    r.finish()?;

    let end = bytes.len();
    let mismatch = |what: &str, i: usize| Error::format(CONTEXT, end as u64, format!("{what} of layer {i} has the wrong length"));
    let mut states = Vec::with_capacity(n);
    for (i, (layer, sec)) in network.layers.iter_mut().zip(per_layer.iter_mut()).enumerate() {
        let has_params = layer.params().is_some();
        if let Layer::SparseConv(cfg) = layer {
            let keys = sec.keys.take().ok_or_else(|| mismatch("filter keys", i))?;
            let values = sec.real("weights", end)?;
            cfg.filter = SparseFilter::from_sorted(cfg.filter.shape().clone(), keys, values)
                .map_err(|e| Error::format(CONTEXT, end as u64, e.to_string()))?;
            let bias = sec.real("bias", end)?;
            if bias.len() != cfg.bias.len() {
                return Err(mismatch("bias", i));
            }
            cfg.bias = bias;
        } else if let Some((w, b)) = layer.params_mut() {
            let weights = sec.real("weights", end)?;
            let bias = sec.real("bias", end)?;
            if weights.len() != w.len() || bias.len() != b.len() {
                return Err(mismatch("weights", i));
            }
            w.copy_from_slice(&weights);
            b.copy_from_slice(&bias);
        }
        if has_params {
            let ls = LayerState {
                weight_acc: sec.real("weight_acc", end)?,
                bias_acc: sec.real("bias_acc", end)?,
                pruned: sec.bits("pruned", end)?,
                warned: sec.bits("warned", end)?,
            };
            let (w_len, b_len, flags) = match layer {
                Layer::SparseConv(cfg) => (cfg.filter.shape().len(), cfg.bias.len(), cfg.filter.shape().len()),
                _ => {
                    let (w, b) = layer.params().expect("has params");
                    (w.len(), b.len(), 0)
                }
            };
            if ls.weight_acc.len() != w_len
                || ls.bias_acc.len() != b_len
                || ls.pruned.len() != flags
                || ls.warned.len() != flags
            {
                return Err(mismatch("optimizer state", i));
            }
            if let Layer::SparseConv(cfg) = layer {
                if cfg.filter.keys().iter().any(|&k| ls.pruned[k as usize]) {
                    return Err(Error::format(CONTEXT, end as u64, format!("layer {i} stores a pruned weight")));
                }
            }
            states.push(Some(ls));
        } else {
            states.push(None);
        }
    }
    let config = TrainConfig {
        learning_rate: h.learning_rate,
        batch_size: h.batch_size,
        epsilon: h.epsilon,
        regularizer: h.regularizer,
        seed,
    };
    Ok(Checkpoint {
        network,
        state: TrainState {
            layers: states,
            epsilon: h.epsilon,
            measured_density: h.measured_density,
            epoch: h.epoch,
        },
        config,
    })
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(cp)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
