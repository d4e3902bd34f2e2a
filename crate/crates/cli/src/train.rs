//! `train` and `eval`.
//!
//! `metrics.csv` columns: `epoch, train_loss, train_accuracy, test_accuracy,
//! rho_1..rho_n` (mean output density of each sparse conv), `weight_nnz,
//! pruned, mac_ops`. Wall-clock times go to `timing.csv` (`epoch, wall_ms`)
//! so that the metrics file is reproducible byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sparsenet_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sparsenet_core::data::SparseDataset;
use sparsenet_core::model::Network;
use sparsenet_core::train::{evaluate, EvalReport, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.csv";

const EVAL_BATCH: usize = 64;

pub(crate) fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub(crate) fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Runs `f` on a dedicated pool when more than one thread is requested.
pub(crate) fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_test_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, log: &mut (dyn Write + Send)) -> CliResult<TrainSummary> {
    let train_cfg = cfg.train_config()?;
    let (train, test) = cfg.datasets()?;
    let spec = cfg.architecture(train.classes())?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let network = Network::new(spec, train_cfg.seed)?;
    let exec = cfg.exec_mode();
    let _ = writeln!(
        log,
        "{} train={} test={} mean input density={:.4}",
        network.spec.describe(),
        train.len(),
        test.len(),
        train.mean_density()
    );
    let mut trainer = Trainer::new(network, train_cfg, exec)?;
    with_threads(cfg.threads, || run_epochs(cfg, &mut trainer, &train, &test, &out, log))?
}

fn run_epochs(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    train: &SparseDataset,
    test: &SparseDataset,
    out: &Path,
    log: &mut (dyn Write + Send),
) -> CliResult<TrainSummary> {
    let sparse = trainer.network.sparse_conv_layers().len();
    let mut metrics = csv_writer(&out.join(METRICS_FILE))?;
    let mut timing = csv_writer(&out.join(TIMING_FILE))?;
    let mut header: Vec<String> = ["epoch", "train_loss", "train_accuracy", "test_accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=sparse).map(|i| format!("rho_{i}")));
    header.extend(["weight_nnz", "pruned", "mac_ops"].iter().map(|s| s.to_string()));
    metrics.write_record(&header)?;
    timing.write_record(["epoch", "wall_ms"])?;
    metrics.flush().map_err(|e| CliError::io(out, e))?;
    timing.flush().map_err(|e| CliError::io(out, e))?;

    let mut final_test_accuracy = None;
    for _ in 0..cfg.train.epochs {
        let m = trainer.train_epoch(train)?;
        let report = evaluate(&trainer.network, test, EVAL_BATCH, trainer.exec)?;
        let acc = report.accuracy();
        final_test_accuracy = Some(acc);
        let mut row = vec![
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_accuracy.to_string(),
            acc.to_string(),
        ];
        row.extend(m.densities.iter().map(|d| d.to_string()));
        row.extend([m.weight_nnz.to_string(), m.pruned.to_string(), m.mac_ops.to_string()]);
        metrics.write_record(&row)?;
        timing.write_record([m.epoch.to_string(), format!("{:.1}", m.wall_ms)])?;
        metrics.flush().map_err(|e| CliError::io(out, e))?;
        timing.flush().map_err(|e| CliError::io(out, e))?;
        let densities: Vec<String> = m.densities.iter().map(|d| format!("{d:.3}")).collect();
        let _ = writeln!(
            log,
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  rho [{}]  nnz {}  pruned {}  {:.0} ms",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            acc,
            densities.join(", "),
            m.weight_nnz,
            m.pruned,
            m.wall_ms
        );
        if cfg.train.checkpoint_every_epoch {
            save(trainer, &out.join(format!("checkpoint_epoch_{}.bin", m.epoch)))?;
        }
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    save(trainer, &checkpoint)?;
    Ok(TrainSummary {
        epochs: trainer.state.epoch,
        final_test_accuracy,
        checkpoint,
    })
}

fn save(trainer: &Trainer, path: &Path) -> CliResult<()> {
    let cp = Checkpoint {
        network: trainer.network.clone(),
        state: trainer.state.clone(),
        config: trainer.config,
    };
    save_checkpoint(&cp, path)?;
    Ok(())
}

/// Evaluates a checkpoint on the configured test split and writes
/// `eval.csv` (`class, correct, total`, then an `all` row).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, log: &mut (dyn Write + Send)) -> CliResult<EvalReport> {
    let out = cfg.out_dir();
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    if !path.is_file() {
        return Err(CliError::Config(format!("missing checkpoint {}", path.display())));
    }
    let cp = load_checkpoint(&path)?;
    let (_, test) = cfg.datasets()?;
    if cp.network.spec.classes != test.classes() {
        return Err(CliError::Config(format!(
            "checkpoint predicts {} classes but the test set has {}",
            cp.network.spec.classes,
            test.classes()
        )));
    }
    let exec = cfg.exec_mode();
    let report = with_threads(cfg.threads, || evaluate(&cp.network, &test, EVAL_BATCH, exec))??;
    create_dir(&out)?;
    let mut w = csv_writer(&out.join(EVAL_FILE))?;
    w.write_record(["class", "correct", "total"])?;
    for (c, (correct, total)) in report.per_class.iter().enumerate() {
        w.write_record([c.to_string(), correct.to_string(), total.to_string()])?;
    }
    w.write_record(["all".to_string(), report.correct.to_string(), report.total.to_string()])?;
    w.flush().map_err(|e| CliError::io(&out, e))?;
    let _ = writeln!(
        log,
        "accuracy {:.4} ({}/{}) after {} epochs",
        report.accuracy(),
        report.correct,
        report.total,
        cp.state.epoch
    );
    Ok(report)
}
