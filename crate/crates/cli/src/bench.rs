//! `bench-conv`: sparse convolution over random tensors, with op counts,
//! memory estimates and optional dense-oracle timings.
//!
//! `bench_conv.csv` columns: `r, rho_d, rho_f, sparse_ms, oracle_ms, mac_ops,
//! estimated_bytes, skipped`. `oracle_ms` is empty when the dense input is
//! above the configured cutoff; a row over the memory guard has only its
//! estimate filled and `skipped = memory`.

use std::io::Write;
use std::time::Instant;

use sparsenet_core::data::random_sparse_tensor;
use sparsenet_core::oracle::dense_conv_forward;
use sparsenet_core::tensor::{memory_estimate, IndexWidth, MemoryModel};
use sparsenet_core::{
    sparse_conv_forward, AttentionVariant, ConvConfig, DenseBuffer, DensityBound, FilterShape, SparseFilter,
    TensorShape,
};

use crate::config::{BenchConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::train::{create_dir, csv_writer, with_threads};

pub const BENCH_FILE: &str = "bench_conv.csv";

/// Allowed range for the op-count ratio when one density doubles.
pub const DOUBLING_RANGE: (f64, f64) = (1.9, 2.1);

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub r: usize,
    pub rho_d: f64,
    pub rho_f: f64,
    pub sparse_ms: Option<f64>,
    pub oracle_ms: Option<f64>,
    pub mac_ops: Option<u64>,
    pub estimated_bytes: u64,
    pub skipped: Option<&'static str>,
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |h, &p| {
        (h ^ p).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29)
    })
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn run_bench(b: &BenchConfig, seed: u64) -> CliResult<Vec<BenchRow>> {
    if b.resolutions.is_empty() || b.rho_d.is_empty() || b.rho_f.is_empty() {
        return Err(CliError::Config("bench needs resolutions, rho_d and rho_f".into()));
    }
    if b.rho_f.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(CliError::Config("rho_f values must lie in (0, 1]".into()));
    }
    let config = |e: sparsenet_core::Error| CliError::Config(e.to_string());
    let mut rows = Vec::new();
    for &r in &b.resolutions {
        let shape = TensorShape::new(b.batch, vec![r; b.rank], b.in_channels).map_err(config)?;
        let fshape = FilterShape::cube(b.kernel, b.rank, b.in_channels, b.out_channels).map_err(config)?;
        let rho_up = b.rho_up.at(r);
        let bound = DensityBound::bounded(rho_up).map_err(config)?;
        let est = memory_estimate(
            r as u64,
            b.rank as u32,
            b.batch as u64,
            b.out_channels as u64,
            rho_up,
            MemoryModel::new(IndexWidth::Bits64),
        )
        .map_err(config)?;
        let estimated_bytes = est.sparse + est.temp;
        for (di, &rho_d) in b.rho_d.iter().enumerate() {
            let rho_d = rho_d.at(r);
            if estimated_bytes > b.max_bytes {
                for &rho_f in &b.rho_f {
                    rows.push(BenchRow {
                        r,
                        rho_d,
                        rho_f,
                        sparse_ms: None,
                        oracle_ms: None,
                        mac_ops: None,
                        estimated_bytes,
                        skipped: Some("memory"),
                    });
                }
                continue;
            }
            let x = random_sparse_tensor(shape.clone(), rho_d, mix(seed, &[r as u64, di as u64])).map_err(config)?;
            let dense_x = (shape.len() <= b.oracle_max_elements).then(|| x.to_dense());
            for (fi, &rho_f) in b.rho_f.iter().enumerate() {
                let filter = SparseFilter::random_uniform(fshape.clone(), rho_f, mix(seed, &[r as u64, 1 << 32, fi as u64]))
                    .map_err(config)?;
                let cfg = ConvConfig::new(filter).with_bound(bound, AttentionVariant::Raw);
                let mut buffer = DenseBuffer::for_shape(&shape);
                let start = Instant::now();
                let out = sparse_conv_forward(&x, &cfg, &mut buffer)?;
                let sparse_ms = ms(start);
                let oracle_ms = match &dense_x {
                    Some(dx) => {
                        let dense_f = cfg.filter.to_dense();
                        let start = Instant::now();
                        dense_conv_forward(dx, &dense_f, &cfg.bias)?;
                        Some(ms(start))
                    }
                    None => None,
                };
                rows.push(BenchRow {
                    r,
                    rho_d,
                    rho_f,
                    sparse_ms: Some(sparse_ms),
                    oracle_ms,
                    mac_ops: Some(out.mac_ops),
                    estimated_bytes,
                    skipped: None,
                });
            }
        }
    }
    Ok(rows)
}

fn is_double(small: f64, large: f64) -> bool {
    (large / small - 2.0).abs() < 1e-9
}

/// Op-count linearity: for every pair of rows that differ only by a
/// doubling of `rho_f` (or of `rho_d`), the `mac_ops` ratio lies in
/// [`DOUBLING_RANGE`]. Returns one line per compared pair, or an error
/// listing the violations. At least one pair per axis is required.
pub fn check_linearity(rows: &[BenchRow]) -> CliResult<Vec<String>> {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut pairs = [0usize; 2];
    for a in rows {
        for b in rows {
            let (Some(ma), Some(mb)) = (a.mac_ops, b.mac_ops) else {
                continue;
            };
            let axis = if a.r == b.r && a.rho_d == b.rho_d && is_double(a.rho_f, b.rho_f) {
                0
            } else if a.r == b.r && a.rho_f == b.rho_f && is_double(a.rho_d, b.rho_d) {
                1
            } else {
                continue;
            };
            pairs[axis] += 1;
            let ratio = mb as f64 / ma.max(1) as f64;
            let ok = ratio >= DOUBLING_RANGE.0 && ratio <= DOUBLING_RANGE.1;
            let name = ["rho_f", "rho_d"][axis];
            let line = format!(
                "r={} rho_d={} rho_f={}: doubling {name} scales mac_ops by {ratio:.4}",
                a.r, a.rho_d, a.rho_f
            );
            if !ok {
                failures.push(line.clone());
            }
            lines.push(line);
        }
    }
    for (axis, &n) in pairs.iter().enumerate() {
        if n == 0 {
            failures.push(format!("no row pair doubles {}", ["rho_f", "rho_d"][axis]));
        }
    }
    if failures.is_empty() {
        Ok(lines)
    } else {
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn cmd_bench_conv(cfg: &RunConfig, check: bool, log: &mut (dyn Write + Send)) -> CliResult<Vec<BenchRow>> {
    let seed = cfg.seed()?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let rows = with_threads(cfg.threads, || run_bench(&cfg.bench, seed))??;
    let mut w = csv_writer(&out.join(BENCH_FILE))?;
    w.write_record(["r", "rho_d", "rho_f", "sparse_ms", "oracle_ms", "mac_ops", "estimated_bytes", "skipped"])?;
    for row in &rows {
        w.write_record([
            row.r.to_string(),
            row.rho_d.to_string(),
            row.rho_f.to_string(),
            opt(row.sparse_ms.map(|t| format!("{t:.3}"))),
            opt(row.oracle_ms.map(|t| format!("{t:.3}"))),
            opt(row.mac_ops),
            row.estimated_bytes.to_string(),
            opt(row.skipped),
        ])?;
        let _ = writeln!(
            log,
            "r={:<4} rho_d={:<8.5} rho_f={:<4} sparse {:>10} ms  oracle {:>10} ms  macs {:>12}",
            row.r,
            row.rho_d,
            row.rho_f,
            opt(row.sparse_ms.map(|t| format!("{t:.3}"))),
            opt(row.oracle_ms.map(|t| format!("{t:.3}"))),
            opt(row.mac_ops)
        );
    }
    w.flush().map_err(|e| CliError::io(&out, e))?;
    if check {
        for line in check_linearity(&rows)? {
            let _ = writeln!(log, "ok  {line}");
        }
    }
    Ok(rows)
}
