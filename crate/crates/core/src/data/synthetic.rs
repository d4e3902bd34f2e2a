use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{SparseTensor, TensorShape};
use crate::Real;

use super::SparseDataset;

/// Exactly `ceil(rho * total)` uniformly chosen positions with values uniform
/// in `[-1, 1]` excluding zero. Deterministic per seed.
pub fn random_sparse_tensor(shape: TensorShape, rho: f64, seed: u64) -> Result<SparseTensor> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!("density {rho} outside (0, 1]")));
    }
    let total = usize::try_from(shape.len())
        .map_err(|_| Error::InvalidParameter("tensor too large to sample".into()))?;
    let count = crate::ceil_count(rho, total).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<u64> = if count == total {
        (0..total as u64).collect()
    } else {
        sample(&mut rng, total, count).into_iter().map(|k| k as u64).collect()
    };
    keys.sort_unstable();
    let values = keys
        .iter()
        .map(|_| loop {
            let v: Real = rng.gen_range(-1.0..=1.0);
            if v != 0.0 {
                break v;
            }
        })
        .collect();
    Ok(SparseTensor::from_parts_unchecked(shape, keys, values))
}

/// Oriented-stroke images on a `side x side` grid in four classes:
/// horizontal, vertical, diagonal and anti-diagonal strokes, each sample
/// holding two strokes at random offsets plus sparse background noise.
pub fn pattern_dataset(samples: usize, side: usize, seed: u64) -> Result<SparseDataset> {
    if side < 4 {
        return Err(Error::InvalidParameter(format!("pattern side {side} below 4")));
    }
    let shape = TensorShape::new(1, vec![side, side], 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = side / 2;
    let mut out = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % 4;
        let mut entries = std::collections::BTreeMap::new();
        for _ in 0..2 {
            let (r0, c0) = (rng.gen_range(0..side), rng.gen_range(0..side));
            for t in 0..len {
                let (r, c) = match class {
                    0 => (r0 as i64, (c0 + t) as i64),
                    1 => ((r0 + t) as i64, c0 as i64),
                    2 => ((r0 + t) as i64, (c0 + t) as i64),
                    _ => ((r0 + t) as i64, c0 as i64 - t as i64),
                };
                if (0..side as i64).contains(&r) && (0..side as i64).contains(&c) {
                    entries.insert((r as usize * side + c as usize) as u64, rng.gen_range(0.5..=1.0));
                }
            }
        }
        for _ in 0..side / 4 {
            let k = rng.gen_range(0..side * side) as u64;
            entries.entry(k).or_insert(rng.gen_range(0.1..0.4));
        }
        let (keys, values) = entries.into_iter().unzip();
        out.push(SparseTensor::from_parts_unchecked(shape.clone(), keys, values));
        labels.push(class);
    }
    SparseDataset::new(out, labels, 4)
}
