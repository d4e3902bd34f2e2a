mod common;

use std::path::PathBuf;

use common::close;
use sparsenet_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use sparsenet_core::data::{load_mnist_idx, pattern_dataset, random_sparse_tensor, sparsify_mnist, MNIST_CROP};
use sparsenet_core::layers::Mode;
use sparsenet_core::model::{ArchitectureSpec, ExecMode, Layer, LayerSpec, Network};
use sparsenet_core::train::{apply_step, prune_network, RegularizerConfig, TrainConfig, TrainState, Trainer};
use sparsenet_core::{AttentionVariant, DensityBound, SparseTensor, TensorShape};

fn conv(i: usize, o: usize, rho: DensityBound) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        rho_up: Some(rho),
    }
}

fn small_spec(layers: Vec<LayerSpec>, classes: usize) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "small".into(),
        input_spatial: vec![8, 8],
        input_channels: 1,
        classes,
        kernel: 3,
        attention: AttentionVariant::Raw,
        layers,
    }
}

fn loss_of(net: &Network, x: &SparseTensor, labels: &[usize]) -> f64 {
    let trace = net.forward(x, Mode::Eval, ExecMode::Sequential, &mut common::rng(0)).unwrap();
    Network::loss(&trace, labels).unwrap().0
}

/// Central differences on every parameter of every layer against the
/// backward pass of the whole network.
fn check_network_gradients(spec: ArchitectureSpec, seed: u64) -> usize {
    let net = Network::new(spec, seed).unwrap();
    let x = random_sparse_tensor(TensorShape::new(2, vec![8, 8], 1).unwrap(), 0.5, seed + 1).unwrap();
    let labels = [0, 2];
    let trace = net.forward(&x, Mode::Eval, ExecMode::Sequential, &mut common::rng(0)).unwrap();
    let (_, d_logits) = Network::loss(&trace, &labels).unwrap();
    let grads = net.backward(&trace, d_logits.clone(), ExecMode::Sequential).unwrap();
    // The parallel pass sums per-sample partials, so only rounding differs.
    let par = net.backward(&trace, d_logits, ExecMode::Parallel).unwrap();
    for (s, p) in grads.layers.iter().zip(&par.layers) {
        if let (Some((sw, sb)), Some((pw, pb))) = (s, p) {
            for (a, b) in sw.iter().chain(sb).zip(pw.iter().chain(pb)) {
                assert!(close(*a, *b, 1e-12, 1e-15));
            }
        }
    }

    let h = 1e-6;
    let mut checked = 0;
    for (li, g) in grads.layers.iter().enumerate() {
        let Some((gw, gb)) = g else { continue };
        for (which, analytic) in [(0, gw), (1, gb)] {
            for (p, &an) in analytic.iter().enumerate() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let nudge = |n: &mut Network, d: f64| {
                    let (w, b) = n.layers[li].params_mut().unwrap();
                    if which == 0 {
                        w[p] += d;
                    } else {
                        b[p] += d;
                    }
                };
                nudge(&mut plus, h);
                nudge(&mut minus, -h);
                let fd = (loss_of(&plus, &x, &labels) - loss_of(&minus, &x, &labels)) / (2.0 * h);
                assert!(
                    close(an, fd, 1e-3, 1e-5),
                    "layer {li} {} {p}: analytic {an} vs numeric {fd}",
                    ["weight", "bias"][which]
                );
                checked += 1;
            }
        }
    }
    checked
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let one_conv = small_spec(
        vec![
            conv(1, 4, DensityBound::Unbounded),
            LayerSpec::MaxPool { stride: 2 },
            LayerSpec::SparseToDense,
            LayerSpec::FullyConnected { width: 3 },
        ],
        3,
    );
    let two_conv = small_spec(
        vec![
            conv(1, 3, DensityBound::Unbounded),
            conv(3, 3, DensityBound::Unbounded),
            LayerSpec::MaxPool { stride: 2 },
            LayerSpec::SparseToDense,
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 2,
                rho_up: None,
            },
            LayerSpec::FullyConnected { width: 5 },
            LayerSpec::FullyConnected { width: 3 },
        ],
        3,
    );
    let n = check_network_gradients(one_conv, 3) + check_network_gradients(two_conv, 4);
    assert!(n > 500);
}

fn pruning_spec(rho: f64) -> ArchitectureSpec {
    let b = DensityBound::bounded(rho).unwrap();
    ArchitectureSpec {
        name: "three-conv".into(),
        input_spatial: vec![12, 12],
        input_channels: 1,
        classes: 4,
        kernel: 3,
        attention: AttentionVariant::Raw,
        layers: vec![
            conv(1, 4, b),
            conv(4, 4, b),
            conv(4, 4, b),
            LayerSpec::MaxPool { stride: 2 },
            LayerSpec::SparseToDense,
            LayerSpec::FullyConnected { width: 4 },
        ],
    }
}

fn config(lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 16,
        epsilon: 0.01,
        regularizer: RegularizerConfig {
            lambda,
            ..RegularizerConfig::default()
        },
        seed,
    }
}

/// Weights stay exactly zero, and their optimizer state frozen, for 50
/// optimizer steps after pruning.
#[test]
fn pruned_weights_stay_zero() {
    let data = pattern_dataset(64, 12, 5).unwrap();
    let mut t = Trainer::new(Network::new(pruning_spec(0.3), 5).unwrap(), config(0.2, 5), ExecMode::Sequential).unwrap();
    while t.state.pruned_count() == 0 {
        t.train_epoch(&data).unwrap();
        assert!(t.state.epoch < 20, "nothing was pruned");
    }
    let frozen = t.state.clone();
    let pruned: Vec<(usize, u64)> = t
        .state
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.as_ref().map(|l| (i, l)))
        .flat_map(|(i, l)| {
            l.pruned
                .iter()
                .enumerate()
                .filter(|(_, &p)| p)
                .map(move |(k, _)| (i, k as u64))
        })
        .collect();
    assert!(!pruned.is_empty());

    let mut rng = common::rng(9);
    let order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    for chunk in order.chunks(8).cycle().take(50) {
        let (x, labels) = data.batch(chunk).unwrap();
        let trace = t.network.forward(&x, Mode::Train, ExecMode::Sequential, &mut rng).unwrap();
        let (_, d) = Network::loss(&trace, &labels).unwrap();
        let g = t.network.backward(&trace, d, ExecMode::Sequential).unwrap();
        apply_step(&mut t.network, &mut t.state, &g.layers, &trace.densities, &t.config.regularizer, 0.01).unwrap();
        steps += 1;
        for &(li, k) in &pruned {
            let Layer::SparseConv(cfg) = &t.network.layers[li] else { unreachable!() };
            assert_eq!(cfg.filter.get(k), None);
            assert_eq!(cfg.filter.to_dense().values()[k as usize], 0.0);
            let ls = t.state.layers[li].as_ref().unwrap();
            let before = frozen.layers[li].as_ref().unwrap();
            assert_eq!(ls.weight_acc[k as usize].to_bits(), before.weight_acc[k as usize].to_bits());
            assert!(ls.pruned[k as usize]);
        }
    }
    assert_eq!(steps, 50);
    // Epoch-end pruning never resurrects a weight either.
    prune_network(&mut t.network, &mut t.state);
    for &(li, k) in &pruned {
        assert!(t.state.layers[li].as_ref().unwrap().pruned[k as usize]);
    }
}

#[test]
fn weight_count_never_grows_and_regularizer_prunes_more() {
    let data = pattern_dataset(96, 12, 2).unwrap();
    let mut finals = Vec::new();
    for lambda in [0.0, 0.2] {
        let mut t =
            Trainer::new(Network::new(pruning_spec(0.3), 2).unwrap(), config(lambda, 2), ExecMode::Sequential).unwrap();
        let mut last = t.network.sparse_weight_count();
        for _ in 0..8 {
            let m = t.train_epoch(&data).unwrap();
            assert!(m.weight_nnz <= last);
            assert_eq!(last - m.weight_nnz, m.pruned);
            last = m.weight_nnz;
        }
        finals.push(last);
    }
    assert!(finals[1] < finals[0], "{finals:?}");
}

#[test]
fn sequential_training_is_reproducible_and_resumable() {
    let data = pattern_dataset(48, 12, 8).unwrap();
    let make = || Trainer::new(Network::new(pruning_spec(0.4), 8).unwrap(), config(0.1, 8), ExecMode::Sequential).unwrap();

    let mut a = make();
    let ma: Vec<_> = (0..3).map(|_| a.train_epoch(&data).unwrap()).collect();

    let mut b = make();
    let mb1 = b.train_epoch(&data).unwrap();
    let cp = Checkpoint {
        network: b.network.clone(),
        state: b.state.clone(),
        config: b.config,
    };
    let back = decode_checkpoint(&encode_checkpoint(&cp).unwrap()).unwrap();
    let mut resumed = Trainer::resume(back.network, back.state, back.config, ExecMode::Sequential);
    let rest: Vec<_> = (0..2).map(|_| resumed.train_epoch(&data).unwrap()).collect();

    let strip = |m: &sparsenet_core::train::EpochMetrics| (m.epoch, m.train_loss.to_bits(), m.weight_nnz, m.mac_ops);
    assert_eq!(strip(&ma[0]), strip(&mb1));
    assert_eq!(strip(&ma[1]), strip(&rest[0]));
    assert_eq!(strip(&ma[2]), strip(&rest[1]));
    assert_eq!(a.network, resumed.network);
}

#[test]
fn parallel_training_matches_sequential() {
    let data = pattern_dataset(32, 12, 4).unwrap();
    let run = |exec| {
        let mut t = Trainer::new(Network::new(pruning_spec(0.3), 4).unwrap(), config(0.1, 4), exec).unwrap();
        t.train_epoch(&data).unwrap();
        t.network
    };
    let (s, p) = (run(ExecMode::Sequential), run(ExecMode::Parallel));
    for (ls, lp) in s.layers.iter().zip(&p.layers) {
        if let (Some((ws, _)), Some((wp, _))) = (ls.params(), lp.params()) {
            for (a, b) in ws.iter().zip(wp) {
                assert!(close(*a, *b, 1e-9, 1e-12));
            }
        }
    }
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Thresholding at 50 and cropping to the central 24x24 gives a mean
/// density of 0.23 +- 0.02.
#[test]
fn thresholded_mnist_density() {
    let dir = mnist_dir();
    let set = load_mnist_idx(
        dir.join("train-images-idx3-ubyte.gz"),
        dir.join("train-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    let data = sparsify_mnist(&set, Some(MNIST_CROP)).unwrap();
    let rho = data.mean_density();
    assert!((rho - 0.23).abs() <= 0.02, "mean density {rho}");
    assert_eq!(data.classes(), 10);
    let full = sparsify_mnist(&set, None).unwrap().mean_density();
    assert!(full < rho);
}

#[test]
fn train_state_tracks_initial_filter_holes() {
    let net = Network::new(pruning_spec(0.3), 1).unwrap();
    let st = TrainState::new(&net, 0.01);
    assert_eq!(st.pruned_count(), 0);
    assert_eq!(st.measured_density.len(), 3);
}
