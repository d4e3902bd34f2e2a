//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails. The MNIST comparison trains two networks
//! for ten epochs each and dominates the runtime.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenet_core::backprop::conv_backward;
use sparsenet_core::data::{load_mnist_idx, pattern_dataset, random_sparse_tensor, sparsify_mnist, MNIST_CROP};
use sparsenet_core::layers::Mode;
use sparsenet_core::model::{ArchitectureSpec, ExecMode, Layer, LayerSpec, Network};
use sparsenet_core::oracle::{dense_conv_backward, dense_conv_forward};
use sparsenet_core::train::{apply_step, RegularizerConfig, TrainConfig, Trainer};
use sparsenet_core::{
    sparse_conv_forward, sparse_conv_forward_parallel, AttentionVariant, ConvConfig, DenseBuffer, DensityBound,
    FilterShape, SparseFilter, SparseGradient, SparseTensor, TensorShape,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

const DENSITIES: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0];

/// Random problem: rank 1..=3, extent up to `max_side`, channels up to 4,
/// batch up to 3.
fn random_case(seed: u64, max_side: usize) -> (SparseTensor, SparseFilter) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rank = r.gen_range(1..=3);
    let spatial: Vec<usize> = (0..rank).map(|_| r.gen_range(1..=max_side)).collect();
    let (batch, cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
    let rho_d = DENSITIES[r.gen_range(0..DENSITIES.len())];
    let rho_f = DENSITIES[r.gen_range(0..DENSITIES.len())];
    let x = random_sparse_tensor(TensorShape::new(batch, spatial, cin).unwrap(), rho_d, r.gen()).unwrap();
    let f = SparseFilter::random_uniform(FilterShape::cube(3, rank, cin, cout).unwrap(), rho_f, r.gen()).unwrap();
    (x, f)
}

fn forward(x: &SparseTensor, cfg: &ConvConfig) -> SparseTensor {
    sparse_conv_forward(x, cfg, &mut DenseBuffer::for_shape(x.shape())).unwrap().output
}

fn bounded(f: &SparseFilter, rho: f64, v: AttentionVariant) -> ConvConfig {
    ConvConfig::new(f.clone()).with_bound(DensityBound::bounded(rho).unwrap(), v)
}

fn forward_oracle() -> Outcome {
    let (mut worst, mut elements) = (0.0f64, 0usize);
    let cases = 240;
    for seed in 0..cases {
        let (x, f) = random_case(seed, 16);
        let cfg = ConvConfig::new(f.clone());
        let sparse = forward(&x, &cfg).to_dense();
        let dense = dense_conv_forward(&x.to_dense(), &f.to_dense(), &cfg.bias).unwrap();
        for (&a, &b) in sparse.values().iter().zip(dense.values()) {
            if !close(a, b, 1e-5, 1e-12) {
                return Err(format!("seed {seed}: sparse {a} vs dense {b}"));
            }
            worst = worst.max(rel_err(a, b));
            elements += 1;
        }
    }
    Ok(format!("{cases} cases, {elements} elements, max relative error {worst:.2e}"))
}

fn random_d_out(out: &SparseTensor, seed: u64) -> SparseGradient {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let values = out.keys().iter().map(|_| r.gen_range(-1.0..1.0)).collect();
    SparseGradient::new(out.shape().clone(), out.keys().to_vec(), values).unwrap()
}

fn masked_loss(x: &SparseTensor, cfg: &ConvConfig, d_out: &SparseGradient) -> Option<f64> {
    let out = forward(x, cfg);
    (out.keys() == d_out.keys()).then(|| out.values().iter().zip(d_out.values()).map(|(y, g)| y * g).sum())
}

fn backward_oracle() -> Outcome {
    let cases = 120;
    let (mut projected, mut fd_checks) = (0usize, 0usize);
    for seed in 0..cases {
        let (x, f) = random_case(10_000 + seed, 6);
        let cfg = match seed % 3 {
            0 => ConvConfig::new(f.clone()),
            1 => bounded(&f, 0.4, AttentionVariant::Raw),
            _ => bounded(&f, 0.3, AttentionVariant::Magnitude),
        };
        let cfg = cfg.with_bias((0..f.shape().out_channels()).map(|c| 0.05 * c as f64).collect());
        let out = forward(&x, &cfg);
        let d_out = random_d_out(&out, seed);
        let g = conv_backward(&x, &cfg, &d_out, &mut DenseBuffer::for_shape(x.shape())).unwrap();

        let (dx, dw, db) = dense_conv_backward(&x.to_dense(), &f.to_dense(), &d_out.to_dense()).unwrap();
        for (&k, &v) in g.d_input.keys().iter().zip(g.d_input.values()) {
            let o = dx.values()[k as usize];
            if !close(v, o, 1e-4, 1e-12) {
                return Err(format!("seed {seed}: d_input[{k}] {v} vs oracle {o}"));
            }
            projected += 1;
        }
        for (&k, &v) in cfg.filter.keys().iter().zip(g.d_filter.values()) {
            let o = dw.values()[k as usize];
            if !close(v, o, 1e-4, 1e-12) {
                return Err(format!("seed {seed}: d_filter[{k}] {v} vs oracle {o}"));
            }
            projected += 1;
        }
        for (&v, &o) in g.d_bias.iter().zip(&db) {
            if !close(v, o, 1e-4, 1e-12) {
                return Err(format!("seed {seed}: d_bias {v} vs oracle {o}"));
            }
        }

        let h = 1e-6;
        for i in 0..x.nnz() {
            let nudge = |d: f64| {
                let mut values = x.values().to_vec();
                values[i] += d;
                SparseTensor::from_sorted(x.shape().clone(), x.keys().to_vec(), values).unwrap()
            };
            let (Some(lp), Some(lm)) = (masked_loss(&nudge(h), &cfg, &d_out), masked_loss(&nudge(-h), &cfg, &d_out))
            else {
                continue;
            };
            let (an, fd) = (g.d_input.values()[i], (lp - lm) / (2.0 * h));
            if !close(an, fd, 1e-3, 1e-7) {
                return Err(format!("seed {seed}: d_input[{i}] {an} vs finite difference {fd}"));
            }
            fd_checks += 1;
        }
        for j in 0..cfg.filter.nnz() {
            let nudge = |d: f64| {
                let mut c = cfg.clone();
                c.filter.values_mut()[j] += d;
                c
            };
            let (Some(lp), Some(lm)) = (masked_loss(&x, &nudge(h), &d_out), masked_loss(&x, &nudge(-h), &d_out))
            else {
                continue;
            };
            let (an, fd) = (g.d_filter.values()[j], (lp - lm) / (2.0 * h));
            if !close(an, fd, 1e-3, 1e-7) {
                return Err(format!("seed {seed}: d_filter[{j}] {an} vs finite difference {fd}"));
            }
            fd_checks += 1;
        }
    }
    Ok(format!(
        "{cases} cases, {projected} projected-oracle and {fd_checks} finite-difference comparisons"
    ))
}

fn fill_in() -> Outcome {
    let mut slabs = 0usize;
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..300 {
        let (x, f) = random_case(20_000 + seed, 12);
        let rho: f64 = r.gen_range(0.01..=1.0);
        let variant = if seed % 2 == 0 { AttentionVariant::Raw } else { AttentionVariant::Magnitude };
        let cfg = bounded(&f, rho, variant);
        let seq = forward(&x, &cfg);
        let par = sparse_conv_forward_parallel(&x, &cfg).unwrap().output;
        let volume = seq.shape().spatial_volume();
        let limit = ((rho * volume as f64) - 1e-9).ceil().max(1.0) as usize;
        for out in [&seq, &par] {
            for b in 0..out.shape().batch() {
                for c in 0..out.shape().channels() {
                    let n = out.slab_range(b, c).len();
                    if n > limit {
                        return Err(format!("seed {seed}: slab ({b}, {c}) holds {n} > {limit}"));
                    }
                    slabs += 1;
                }
            }
        }
    }
    Ok(format!(
        "{slabs} slabs within bound; every forward call in the suite also asserts it"
    ))
}

fn sparsenet(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sparsenet"))
        .args(args)
        .output()
        .expect("spawn sparsenet")
}

fn run_ok(args: &[&str]) -> Result<std::process::Output, String> {
    let out = sparsenet(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`sparsenet {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn config(name: &str) -> String {
    root().join("configs").join(name).display().to_string()
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Rows of a CSV file keyed by header name.
fn read_csv(p: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect()
        })
        .collect()
}

fn num(row: &std::collections::HashMap<String, String>, col: &str) -> f64 {
    row[col].parse().unwrap()
}

fn memory_model() -> Outcome {
    let dir = tmp();
    let out = run_ok(&["mem-report", "--check", "--config", &config("mem_report.toml"), "--out", path(dir.path())])?;
    let rows = read_csv(&dir.path().join("mem_report.csv"));
    let last = rows.last().ok_or("empty mem_report.csv")?;
    let ratio = num(last, "dense_over_sparse64");
    let cells = String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.starts_with("ok")).count();
    Ok(format!("{cells} checks pass; dense/sparse-64 at 512^3 is {ratio:.1}x"))
}

fn op_scaling() -> Outcome {
    let dir = tmp();
    let out = run_ok(&["bench-conv", "--check", "--config", &config("bench_conv.toml"), "--out", path(dir.path())])?;
    let pairs = String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.starts_with("ok")).count();
    Ok(format!("{pairs} density doublings scale mac_ops within [1.9, 2.1]"))
}

fn final_test_accuracy(dir: &Path) -> f64 {
    num(read_csv(&dir.join("metrics.csv")).last().unwrap(), "test_accuracy")
}

fn mnist() -> Outcome {
    let data = root().join("data/mnist");
    let set = load_mnist_idx(
        data.join("train-images-idx3-ubyte.gz"),
        data.join("train-labels-idx1-ubyte.gz"),
    )
    .map_err(|e| e.to_string())?;
    let rho = sparsify_mnist(&set, Some(MNIST_CROP)).map_err(|e| e.to_string())?.mean_density();
    if (rho - 0.23).abs() > 0.02 {
        return Err(format!("thresholded density {rho:.4} outside 0.23 +- 0.02"));
    }
    let (b, u) = (tmp(), tmp());
    run_ok(&["train", "--config", &config("mnist24_bounded.toml"), "--out", path(b.path())])?;
    run_ok(&["train", "--config", &config("mnist24_unbounded.toml"), "--out", path(u.path())])?;
    let (ab, au) = (final_test_accuracy(b.path()), final_test_accuracy(u.path()));
    let gap = (ab - au).abs() * 100.0;
    let line = format!("density {rho:.4}; test accuracy bounded {ab:.4}, unbounded {au:.4}, gap {gap:.2} pp");
    if gap <= 3.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn pruning() -> Outcome {
    let (d0, d2) = (tmp(), tmp());
    run_ok(&["train", "--config", &config("pruning_lambda0.toml"), "--out", path(d0.path())])?;
    run_ok(&["train", "--config", &config("pruning_lambda02.toml"), "--out", path(d2.path())])?;
    let mut finals = Vec::new();
    let mut macs = Vec::new();
    for (lambda, dir) in [("0", &d0), ("0.2", &d2)] {
        let rows = read_csv(&dir.path().join("metrics.csv"));
        if rows.len() != 20 {
            return Err(format!("lambda={lambda}: {} epochs logged", rows.len()));
        }
        let nnz: Vec<f64> = rows.iter().map(|r| num(r, "weight_nnz")).collect();
        if let Some(w) = nnz.windows(2).find(|w| w[1] > w[0]) {
            return Err(format!("lambda={lambda}: weight count grew from {} to {}", w[0], w[1]));
        }
        finals.push(*nnz.last().unwrap());
        macs = vec![num(&rows[0], "mac_ops"), num(&rows[19], "mac_ops")];
    }
    if finals[1] >= finals[0] {
        return Err(format!("final weights lambda=0.2 {} not below lambda=0 {}", finals[1], finals[0]));
    }
    if macs[1] >= macs[0] {
        return Err(format!("lambda=0.2 mac_ops did not fall: {} -> {}", macs[0], macs[1]));
    }
    Ok(format!(
        "final weights {} (lambda=0) vs {} (lambda=0.2); lambda=0.2 mac_ops {:.3e} -> {:.3e}",
        finals[0], finals[1], macs[0], macs[1]
    ))
}

fn zero_permanence() -> Outcome {
    let b = DensityBound::bounded(0.3).unwrap();
    let conv = |i, o| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        rho_up: Some(b),
    };
    let spec = ArchitectureSpec {
        name: "three-conv".into(),
        input_spatial: vec![12, 12],
        input_channels: 1,
        classes: 4,
        kernel: 3,
        attention: AttentionVariant::Raw,
        layers: vec![
            conv(1, 4),
            conv(4, 4),
            conv(4, 4),
            LayerSpec::MaxPool { stride: 2 },
            LayerSpec::SparseToDense,
            LayerSpec::FullyConnected { width: 4 },
        ],
    };
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 16,
        epsilon: 0.01,
        regularizer: RegularizerConfig {
            lambda: 0.2,
            ..RegularizerConfig::default()
        },
        seed: 5,
    };
    let data = pattern_dataset(64, 12, 5).unwrap();
    let mut t = Trainer::new(Network::new(spec, 5).unwrap(), cfg, ExecMode::Sequential).unwrap();
    while t.state.pruned_count() == 0 {
        t.train_epoch(&data).unwrap();
        if t.state.epoch >= 20 {
            return Err("nothing pruned in 20 epochs".into());
        }
    }
    let pruned: Vec<(usize, usize)> = t
        .state
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.as_ref().map(|l| (i, l)))
        .flat_map(|(i, l)| l.pruned.iter().enumerate().filter(|(_, &p)| p).map(move |(k, _)| (i, k)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(8).cycle().take(50) {
        let (x, labels) = data.batch(chunk).unwrap();
        let trace = t.network.forward(&x, Mode::Train, ExecMode::Sequential, &mut rng).unwrap();
        let (_, d) = Network::loss(&trace, &labels).unwrap();
        let g = t.network.backward(&trace, d, ExecMode::Sequential).unwrap();
        apply_step(&mut t.network, &mut t.state, &g.layers, &trace.densities, &t.config.regularizer, 0.01).unwrap();
        for &(li, k) in &pruned {
            let Layer::SparseConv(c) = &t.network.layers[li] else {
                return Err(format!("layer {li} is not a sparse convolution"));
            };
            let v = c.filter.to_dense().values()[k];
            if v != 0.0 || c.filter.get(k as u64).is_some() {
                return Err(format!("layer {li} weight {k} came back as {v}"));
            }
        }
    }
    Ok(format!("{} pruned weights stay exactly zero for 50 steps", pruned.len()))
}

fn determinism() -> Outcome {
    let (a, b) = (tmp(), tmp());
    for d in [&a, &b] {
        run_ok(&["train", "--threads", "1", "--config", &config("pruning_lambda02.toml"), "--out", path(d.path())])?;
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
    let (ma, mb) = (read(&a), read(&b));
    if ma == mb {
        Ok(format!("metrics.csv identical across two runs ({} bytes)", ma.len()))
    } else {
        Err("metrics.csv differs between two runs with the same seed".into())
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("forward oracle equivalence", forward_oracle),
        ("backward oracle equivalence", backward_oracle),
        ("memory model table", memory_model),
        ("fill-in bound", fill_in),
        ("op count linear in density", op_scaling),
        ("sparse MNIST bound comparison", mnist),
        ("pruning dynamics", pruning),
        ("zero permanence", zero_permanence),
        ("sequential determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
