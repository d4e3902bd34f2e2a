//! Command-line front end for training runs, convolution benchmarks, memory
//! reports and checkpoint evaluation. All outputs are CSV files in `--out`.

pub mod bench;
pub mod config;
pub mod error;
pub mod mem;
pub mod train;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sparsenet", version, about = "Sparse convolutional networks on coordinate-list tensors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// 1 runs sequentially and is bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write per-epoch metrics and a checkpoint.
    Train,
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time sparse convolution on random tensors and count operations.
    BenchConv {
        /// Fail (exit 3) unless op counts scale linearly with density.
        #[arg(long)]
        check: bool,
    },
    /// Report layer memory footprints across resolutions.
    MemReport {
        /// Fail (exit 3) unless the footprints match the reference table.
        #[arg(long)]
        check: bool,
    },
}

pub fn run(cli: &Cli, log: &mut (dyn Write + Send)) -> CliResult<()> {
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out.clone(),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Train => train::cmd_train(&cfg, log).map(|_| ()),
        Command::Eval { checkpoint } => train::cmd_eval(&cfg, checkpoint.as_deref(), log).map(|_| ()),
        Command::BenchConv { check } => bench::cmd_bench_conv(&cfg, *check, log).map(|_| ()),
        Command::MemReport { check } => mem::cmd_mem_report(&cfg, *check, log).map(|_| ()),
    }
}
