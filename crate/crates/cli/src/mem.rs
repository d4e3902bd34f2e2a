//! `mem-report`: layer-output memory footprints across resolutions.
//!
//! `mem_report.csv` has one row per resolution: `r, dense_bytes,
//! sparse32_bytes, sparse64_bytes, temp_bytes, dense_gb, sparse32_gb,
//! sparse64_gb, temp_gb, dense_over_sparse64`. The 32-bit columns are empty
//! where the index space does not fit 32-bit keys.

use std::io::Write;

use sparsenet_core::tensor::{memory_estimate, IndexWidth, MemoryModel};

use crate::config::{MemConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::train::{create_dir, csv_writer};

pub const MEM_FILE: &str = "mem_report.csv";
const GB: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemRow {
    pub r: u64,
    pub dense: u64,
    pub sparse32: Option<u64>,
    pub sparse64: u64,
    pub temp: u64,
}

impl MemRow {
    pub fn ratio(&self) -> f64 {
        self.dense as f64 / self.sparse64 as f64
    }
}

pub fn mem_rows(m: &MemConfig) -> CliResult<Vec<MemRow>> {
    m.resolutions
        .iter()
        .map(|&r| {
            let rho_up = 1.0 / r as f64;
            let at = |w| memory_estimate(r, m.rank, m.batch, m.channels, rho_up, MemoryModel::new(w));
            let e64 = at(IndexWidth::Bits64).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(MemRow {
                r,
                dense: e64.dense,
                sparse32: at(IndexWidth::Bits32).ok().map(|e| e.sparse),
                sparse64: e64.sparse,
                temp: e64.temp,
            })
        })
        .collect()
}

/// A printed reference cell: value in GB and the unit of its last digit.
/// `None` marks a configuration that cannot be represented.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub r: u64,
    pub quantity: Quantity,
    pub printed: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Dense,
    Sparse32,
    Sparse64,
    Temp,
}

impl Quantity {
    fn name(self) -> &'static str {
        match self {
            Quantity::Dense => "dense",
            Quantity::Sparse32 => "sparse-32",
            Quantity::Sparse64 => "sparse-64",
            Quantity::Temp => "temp",
        }
    }

    fn bytes(self, row: &MemRow) -> Option<u64> {
        match self {
            Quantity::Dense => Some(row.dense),
            Quantity::Sparse32 => row.sparse32,
            Quantity::Sparse64 => Some(row.sparse64),
            Quantity::Temp => Some(row.temp),
        }
    }
}

const fn cell(r: u64, quantity: Quantity, value: f64, unit: f64) -> Cell {
    Cell {
        r,
        quantity,
        printed: Some((value, unit)),
    }
}

/// Published footprints at batch 32, 8 output channels, 3D, `rho_up = 1/r`.
pub const REFERENCE: [Cell; 16] = [
    cell(32, Quantity::Dense, 0.04, 0.01),
    cell(64, Quantity::Dense, 0.27, 0.01),
    cell(128, Quantity::Dense, 2.15, 0.01),
    cell(256, Quantity::Dense, 17.18, 0.01),
    cell(32, Quantity::Sparse32, 2e-3, 1e-3),
    cell(64, Quantity::Sparse32, 8e-3, 1e-3),
    cell(128, Quantity::Sparse32, 0.03, 0.01),
    Cell {
        r: 256,
        quantity: Quantity::Sparse32,
        printed: None,
    },
    cell(32, Quantity::Sparse64, 3e-3, 1e-3),
    cell(64, Quantity::Sparse64, 0.013, 0.001),
    cell(128, Quantity::Sparse64, 0.05, 0.01),
    cell(256, Quantity::Sparse64, 0.2, 0.1),
    cell(32, Quantity::Temp, 3e-4, 1e-4),
    cell(64, Quantity::Temp, 0.002, 0.001),
    cell(128, Quantity::Temp, 0.016, 0.001),
    cell(256, Quantity::Temp, 0.13, 0.01),
];

/// Published dense-to-sparse-64 ratio at 512^3 and its relative tolerance.
pub const RATIO_512: (f64, f64) = (170.0, 0.10);

/// Outcome of comparing one cell: `exact` when rounding to the printed unit
/// gives the printed value, `close` when within one unit of it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCheck {
    pub label: String,
    pub computed_gb: Option<f64>,
    pub exact: bool,
    pub close: bool,
}

pub fn check_cells(rows: &[MemRow]) -> Vec<CellCheck> {
    REFERENCE
        .iter()
        .map(|c| {
            let row = rows.iter().find(|row| row.r == c.r);
            let computed = row.and_then(|row| c.quantity.bytes(row)).map(|b| b as f64 / GB);
            let label = format!("{} at {}^3", c.quantity.name(), c.r);
            let (exact, close) = match (row, c.printed, computed) {
                (None, _, _) => (false, false),
                (Some(_), None, None) => (true, true),
                (Some(_), Some((value, unit)), Some(gb)) => {
                    let rounded = (gb / unit).round() * unit;
                    (
                        (rounded - value).abs() < unit * 1e-6,
                        (gb - value).abs() <= unit * (1.0 + 1e-9),
                    )
                }
                _ => (false, false),
            };
            CellCheck {
                label,
                computed_gb: computed,
                exact,
                close,
            }
        })
        .collect()
}

fn gb(bytes: Option<u64>) -> String {
    bytes.map(|b| (b as f64 / GB).to_string()).unwrap_or_default()
}

pub fn cmd_mem_report(cfg: &RunConfig, check: bool, log: &mut (dyn Write + Send)) -> CliResult<Vec<MemRow>> {
    let m = &cfg.mem;
    let rows = mem_rows(m)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut w = csv_writer(&out.join(MEM_FILE))?;
    w.write_record([
        "r",
        "dense_bytes",
        "sparse32_bytes",
        "sparse64_bytes",
        "temp_bytes",
        "dense_gb",
        "sparse32_gb",
        "sparse64_gb",
        "temp_gb",
        "dense_over_sparse64",
    ])?;
    for row in &rows {
        w.write_record([
            row.r.to_string(),
            row.dense.to_string(),
            row.sparse32.map(|b| b.to_string()).unwrap_or_default(),
            row.sparse64.to_string(),
            row.temp.to_string(),
            gb(Some(row.dense)),
            gb(row.sparse32),
            gb(Some(row.sparse64)),
            gb(Some(row.temp)),
            row.ratio().to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&out, e))?;

    let _ = write!(log, "{:<16}", "resolution");
    for row in &rows {
        let _ = write!(log, "{:>12}", format!("{}^{}", row.r, m.rank));
    }
    let _ = writeln!(log);
    for q in [Quantity::Dense, Quantity::Sparse32, Quantity::Sparse64, Quantity::Temp] {
        let _ = write!(log, "{:<16}", format!("{} [GB]", q.name()));
        for row in &rows {
            let cell = q
                .bytes(row)
                .map(|b| format!("{:.3e}", b as f64 / GB))
                .unwrap_or_else(|| "-".into());
            let _ = write!(log, "{cell:>12}");
        }
        let _ = writeln!(log);
    }

    if check {
        if m.rank != 3 || m.batch != 32 || m.channels != 8 {
            return Err(CliError::Config(
                "--check compares against the batch 32, 8 channel, 3D setting".into(),
            ));
        }
        let mut failures = Vec::new();
        for c in check_cells(&rows) {
            let status = match (c.exact, c.close) {
                (true, _) => "ok",
                (false, true) => "ok (within one unit of the last printed digit)",
                _ => "FAIL",
            };
            let _ = writeln!(log, "{status:<4} {}: {:?} GB", c.label, c.computed_gb);
            if !c.close {
                failures.push(c.label);
            }
        }
        match rows.iter().find(|row| row.r == 512) {
            Some(row) => {
                let ratio = row.ratio();
                let ok = (ratio / RATIO_512.0 - 1.0).abs() <= RATIO_512.1;
                let _ = writeln!(log, "{} dense/sparse-64 at 512^3: {ratio:.1}x", if ok { "ok  " } else { "FAIL" });
                if !ok {
                    failures.push(format!("ratio at 512^3 is {ratio:.1}"));
                }
            }
            None => failures.push("no 512^3 row".into()),
        }
        if !failures.is_empty() {
            return Err(CliError::CheckFailed(failures.join(", ")));
        }
    }
    Ok(rows)
}
