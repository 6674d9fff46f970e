//! Gradient checks for every layer kind, the full network and both losses.

#![allow(dead_code)]

use csalnet_core::loss::LossKind;
use csalnet_core::model::{build_model, forward_graph, ModelConfig};
use csalnet_core::nn::{grad_check, grad_check_with, weighted_sum_head, ConvGeometry, Graph, Layer, LayerSpec, Mode, NodeId, ParamStore};
use csalnet_core::rng::seeded;
use csalnet_core::{Result, Tensor};
use rand::Rng as _;

pub const TOL: f64 = 1e-3;
pub const EW_TOL: f64 = 1e-5;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn check_layer(spec: LayerSpec, inputs: &[Tensor], mode: Mode, seeds: &[u64]) -> f64 {
    let layer = Layer::init(spec, &mut seeded(11)).unwrap();
    let mut store = ParamStore::new();
    let ids = layer.register(&mut store, "l").unwrap();
    // non-zero biases so that ReLU-free layers still see every parameter path
    for t in store.tensors_mut() {
        if t.ndim() == 1 {
            let n = t.len();
            *t = uniform(&[n], 0.1, 0.5, 12);
        }
    }
    let running = layer.running.clone();
    grad_check(&store, inputs, 1e-6, mode, seeds, |g: &mut Graph<'_>, xs: &[NodeId]| {
        layer.spec.apply(g, &ids, xs, running.as_ref().map(|(m, v)| (m, v)))
    })
    .unwrap()
}

pub fn conv_same() -> f64 {
    check_layer(LayerSpec::conv_same(3, 4, 3), &[uniform(&[2, 3, 5, 5], -1.0, 1.0, 1)], Mode::Eval, &[0])
}

pub fn conv_strided() -> f64 {
    let spec = LayerSpec::Conv2d {
        in_channels: 2,
        out_channels: 3,
        geometry: ConvGeometry { kernel: 3, stride: 2, padding: 1 },
    };
    check_layer(spec, &[uniform(&[1, 2, 6, 6], -1.0, 1.0, 2)], Mode::Eval, &[0])
}

pub fn conv_pointwise() -> f64 {
    check_layer(LayerSpec::conv_same(4, 2, 1), &[uniform(&[2, 4, 3, 3], -1.0, 1.0, 3)], Mode::Eval, &[0])
}

pub fn dense() -> f64 {
    let spec = LayerSpec::Dense { in_features: 5, out_features: 3 };
    check_layer(spec, &[uniform(&[4, 5], -1.0, 1.0, 4)], Mode::Eval, &[0])
}

pub fn embedding() -> f64 {
    let spec = LayerSpec::Embedding { categories: 4, dim: 3 };
    let idx = Tensor::new(vec![5], vec![0.0, 3.0, 3.0, 1.0, 2.0]).unwrap();
    check_layer(spec, &[idx], Mode::Eval, &[0])
}

pub fn batchnorm_train() -> f64 {
    check_layer(LayerSpec::BatchNorm { channels: 3 }, &[uniform(&[4, 3, 2, 2], -2.0, 2.0, 5)], Mode::Train, &[0])
}

pub fn batchnorm_eval() -> f64 {
    check_layer(LayerSpec::BatchNorm { channels: 3 }, &[uniform(&[4, 3, 2, 2], -2.0, 2.0, 5)], Mode::Eval, &[0])
}

pub fn batchnorm_flat() -> f64 {
    check_layer(LayerSpec::BatchNorm { channels: 4 }, &[uniform(&[6, 4], -2.0, 2.0, 6)], Mode::Train, &[0])
}

pub fn maxpool() -> f64 {
    check_layer(LayerSpec::MaxPool2, &[uniform(&[2, 2, 4, 6], -1.0, 1.0, 7)], Mode::Eval, &[0])
}

pub fn upsample() -> f64 {
    check_layer(LayerSpec::UpsampleNearest2, &[uniform(&[2, 2, 4, 6], -1.0, 1.0, 7)], Mode::Eval, &[0])
}

pub fn dropout_train() -> f64 {
    check_layer(LayerSpec::Dropout { p: 0.5 }, &[uniform(&[3, 2, 4, 4], -1.0, 1.0, 8)], Mode::Train, &[42])
}

pub fn dropout_mc() -> f64 {
    check_layer(LayerSpec::Dropout { p: 0.3 }, &[uniform(&[3, 2, 4, 4], -1.0, 1.0, 8)], Mode::Mc, &[1, 2, 3])
}

/// Alternating signs, away from the ReLU kink.
fn signed() -> Tensor {
    let mut x = uniform(&[2, 3, 3, 3], 0.05, 1.0, 9);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    x
}

pub fn relu() -> f64 {
    check_layer(LayerSpec::Relu, &[signed()], Mode::Eval, &[0])
}

pub fn sigmoid() -> f64 {
    check_layer(LayerSpec::Sigmoid, &[signed()], Mode::Eval, &[0])
}

pub fn concat() -> f64 {
    check_layer(LayerSpec::ConcatChannels, &[signed(), uniform(&[2, 1, 3, 3], -1.0, 1.0, 10)], Mode::Eval, &[0])
}

pub fn tile() -> f64 {
    let store = ParamStore::new();
    grad_check(&store, &[uniform(&[2, 3], -1.0, 1.0, 11)], 1e-6, Mode::Eval, &[0], |g, xs| g.tile(xs[0], 3, 2)).unwrap()
}

pub fn conv_chain() -> f64 {
    let conv = Layer::init(LayerSpec::conv_same(2, 3, 3), &mut seeded(13)).unwrap();
    let mut store = ParamStore::new();
    let ids = conv.register(&mut store, "c").unwrap();
    store.tensors_mut()[1] = uniform(&[3], 0.2, 0.6, 14);
    let build = |g: &mut Graph<'_>, xs: &[NodeId]| -> Result<NodeId> {
        let y = conv.spec.apply(g, &ids, xs, None)?;
        let y = g.relu(y)?;
        let y = g.dropout(y, 0.25)?;
        g.sigmoid(y)
    };
    let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, 15);
    grad_check(&store, &[x], 1e-6, Mode::Train, &[21, 22], build).unwrap()
}

/// The whole network at 16 px with context, dropout and batch-norm in
/// train mode, over a batch of three.
pub fn full_model() -> f64 {
    let cfg = ModelConfig {
        channel_widths: vec![2, 2, 3, 2, 3, 2],
        embedding_dim: 2,
        dropout_p: 0.3,
        ..ModelConfig::desk(16)
    };
    let mut net = build_model(&cfg).unwrap();
    // zero biases leave this narrow network with activations exactly at the
    // ReLU kink, where central differences are meaningless
    let mut rng = seeded(9);
    for (i, name) in net.store.names().to_vec().iter().enumerate() {
        if name.ends_with(".b") {
            for v in net.store.tensors_mut()[i].data_mut() {
                *v = rng.gen_range(0.05..0.3);
            }
        }
    }
    let x = uniform(&[3, 3, 16, 16], 0.0, 1.0, 7);
    grad_check_with(
        &net.store,
        &[x],
        1e-5,
        Mode::Train,
        &[1, 2, 3],
        |g, ids| Ok(forward_graph(g, &net, ids[0], Some(&[0, 3, 1]))?.output),
        weighted_sum_head(3),
    )
    .unwrap()
    .max_rel_error
}

pub fn loss_fd_error(kind: LossKind, seed: u64) -> f64 {
    let pred = uniform(&[8, 8], 0.01, 0.99, seed);
    let target = uniform(&[8, 8], 0.0, 1.0, seed + 1000);
    let (_, grad) = kind.evaluate(&pred, &target).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..pred.len() {
        let mut p = pred.clone();
        p.data_mut()[i] += h;
        let plus = kind.evaluate(&p, &target).unwrap().0;
        p.data_mut()[i] -= 2.0 * h;
        let minus = kind.evaluate(&p, &target).unwrap().0;
        let n = (plus - minus) / (2.0 * h);
        let a = grad.data()[i];
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
    }
    worst
}

pub fn ew_mse() -> f64 {
    (0..5).map(|s| loss_fd_error(LossKind::EwMse, s)).fold(0.0, f64::max)
}

pub fn mse() -> f64 {
    (0..5).map(|s| loss_fd_error(LossKind::Mse, s)).fold(0.0, f64::max)
}

/// `(name, max relative error, tolerance)` for every case.
pub fn all() -> Vec<(&'static str, f64, f64)> {
    let cases: [(&str, fn() -> f64, f64); 20] = [
        ("conv2d same", conv_same, TOL),
        ("conv2d strided", conv_strided, TOL),
        ("conv2d 1x1", conv_pointwise, TOL),
        ("dense", dense, 1e-6),
        ("embedding", embedding, TOL),
        ("batchnorm train", batchnorm_train, TOL),
        ("batchnorm eval", batchnorm_eval, TOL),
        ("batchnorm flat", batchnorm_flat, TOL),
        ("maxpool2", maxpool, TOL),
        ("upsample_nearest2", upsample, TOL),
        ("dropout train", dropout_train, TOL),
        ("dropout mc", dropout_mc, TOL),
        ("relu", relu, TOL),
        ("sigmoid", sigmoid, TOL),
        ("concat_channels", concat, TOL),
        ("tile", tile, TOL),
        ("conv-relu-dropout-sigmoid", conv_chain, TOL),
        ("full model 16px", full_model, TOL),
        ("ew-mse", ew_mse, EW_TOL),
        ("mse", mse, TOL),
    ];
    cases.iter().map(|&(n, f, t)| (n, f(), t)).collect()
}
