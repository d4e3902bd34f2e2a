//! Per-channel k-selection that bounds the density of a convolution output.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Which responses survive k-selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Keep the k largest raw values, preferring large positive responses.
    #[default]
    Raw,
    /// Keep the k values of largest magnitude.
    Magnitude,
}

impl AttentionVariant {
    #[inline]
    pub fn score(self, v: Real) -> Real {
        match self {
            AttentionVariant::Raw => v,
            AttentionVariant::Magnitude => v.abs(),
        }
    }
}

/// Upper bound on the per-(batch, channel) output density of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DensityBound {
    #[default]
    Unbounded,
    Bounded(f64),
}

impl DensityBound {
    pub fn bounded(rho_up: f64) -> Result<Self> {
        if rho_up > 0.0 && rho_up <= 1.0 {
            Ok(DensityBound::Bounded(rho_up))
        } else {
            Err(Error::InvalidParameter(format!(
                "density bound {rho_up} outside (0, 1]"
            )))
        }
    }

    /// `ceil(rho_up * volume)` responses per slab, or `None` when unbounded.
    pub fn budget(self, volume: usize) -> Result<Option<usize>> {
        match self {
            DensityBound::Unbounded => Ok(None),
            DensityBound::Bounded(rho) => {
                Self::bounded(rho)?;
                Ok(Some(crate::ceil_count(rho, volume).clamp(1, volume)))
            }
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            DensityBound::Unbounded => None,
            DensityBound::Bounded(rho) => Some(rho),
        }
    }

    /// Bound used by the density regularizer; an unbounded layer may fill up.
    pub fn target(self) -> f64 {
        self.value().unwrap_or(1.0)
    }
}

impl fmt::Display for DensityBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityBound::Unbounded => write!(f, "unbounded"),
            DensityBound::Bounded(rho) => write!(f, "{rho}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BoundRepr {
    Value(f64),
    Word(String),
}

impl Serialize for DensityBound {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DensityBound::Unbounded => BoundRepr::Word("unbounded".into()),
            DensityBound::Bounded(rho) => BoundRepr::Value(*rho),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityBound {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match BoundRepr::deserialize(d)? {
            BoundRepr::Word(w) if w == "unbounded" => Ok(DensityBound::Unbounded),
            BoundRepr::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a density in (0, 1] or \"unbounded\", got {w:?}"
            ))),
            BoundRepr::Value(v) => DensityBound::bounded(v).map_err(serde::de::Error::custom),
        }
    }
}

/// Orders entries best-first: higher score, then smaller key.
#[inline]
fn rank(variant: AttentionVariant, a: &(u64, Real), b: &(u64, Real)) -> Ordering {
    variant
        .score(b.1)
        .total_cmp(&variant.score(a.1))
        .then(a.0.cmp(&b.0))
}

/// Keeps the `k` strongest of `entries` and returns them sorted by key.
pub fn k_select(
    mut entries: Vec<(u64, Real)>,
    k: usize,
    variant: AttentionVariant,
) -> Result<Vec<(u64, Real)>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    select_in_place(&mut entries, k, variant);
    Ok(entries)
}

/// In-place form of [`k_select`]; input must have unique keys.
pub(crate) fn select_in_place(entries: &mut Vec<(u64, Real)>, k: usize, variant: AttentionVariant) {
    if entries.len() <= k {
        entries.sort_unstable_by_key(|e| e.0);
        return;
    }
    entries.select_nth_unstable_by(k - 1, |a, b| rank(variant, a, b));
    entries.truncate(k);
    entries.sort_unstable_by_key(|e| e.0);
}
