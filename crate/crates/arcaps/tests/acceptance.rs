//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 6-9 need the MNIST IDX files under `$ARCAPS_DATA_DIR/mnist` or
//! `<workspace>/data/mnist`; without them those criteria report FAIL.
//! The process exits non-zero only when the harness itself breaks, so the
//! verdict lines are the result.

#![allow(clippy::needless_range_loop)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use arcaps::checkpoint::Checkpoint;
use arcaps::config::RunConfig;
use arcaps::{cli, datasets, report, trainer};
use arcaps_core::align;
use arcaps_core::autodiff::{NormStats, Padding};
use arcaps_core::data::{Dataset, Split};
use arcaps_core::gradcheck::check_gradients;
use arcaps_core::lab::{self, Family};
use arcaps_core::layers::{self, ConvCapsOptions, ConvCapsParams, PrimaryCapsParams};
use arcaps_core::loss::{self, LossConfig};
use arcaps_core::model::{ArCapsNet, ModelConfig};
use arcaps_core::params::{Bound, ParamKind, ParameterStore};
use arcaps_core::{rng_from_seed, Graph, Mode, NodeId, Result as CoreResult, Tensor};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::Rng as _;

type Verdict = Result<String, String>;

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_root() -> PathBuf {
    match std::env::var_os("ARCAPS_DATA_DIR") {
        Some(d) => PathBuf::from(d).join("mnist"),
        None => workspace().join("data/mnist"),
    }
}

fn within(value: f64, target: f64, tolerance: f64) -> bool {
    (value - target).abs() <= tolerance
}

// ---------------------------------------------------------------- 1

/// Trainable scalars counted layer by layer from the architecture alone.
fn count_by_hand(c: &ModelConfig) -> usize {
    let mut total = 0;
    let mut channels = c.input_channels;
    for _ in 0..c.stem_layers {
        total += 9 * channels * c.stem_width + c.stem_width + 2 * c.stem_width;
        channels = c.stem_width;
    }
    let (pd, pn) = (c.primary_dim, c.primary_channels);
    total += 9 * channels * pd * pn + pd * pn + pn * pd * pd + pn * pd;
    let (mut rows, mut cols) = (c.input_width.div_ceil(2), c.input_height.div_ceil(2));
    let (mut din, mut m) = (pd, pn);
    for layer in &c.conv_caps {
        let (dout, n) = (layer.dim, layer.channels);
        total += n * m * 9 * din * dout + n * dout * m + n * dout * dout + n * dout;
        rows = rows.div_ceil(layer.stride);
        cols = cols.div_ceil(layer.stride);
        (din, m) = (dout, n);
    }
    let (dout, n) = (c.class_dim, c.classes);
    total += n * m * rows * cols * din * dout + n * dout * m + n * dout * dout + n * dout;
    let [h1, h2] = c.decoder_hidden;
    let pixels = c.input_width * c.input_height * c.input_channels;
    total += (n * dout) * h1 + h1 + h1 * h2 + h2 + h2 * pixels + pixels;
    total
}

fn parameter_counts() -> Verdict {
    let cases = [
        ("MNIST", ModelConfig::mnist(), 5.31e6, 0.02),
        ("grid(0,16)", ModelConfig::cifar_grid(0, 16), 7.3e6, 0.05),
        ("grid(4,32)", ModelConfig::cifar_grid(4, 32), 9.6e6, 0.05),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, model, target, tol) in cases {
        let counted = ArCapsNet::new(model.clone()).map_err(|e| e.to_string())?.count_parameters().total;
        let hand = count_by_hand(&model);
        let close = (counted as f64 - target).abs() / target <= tol;
        ok &= close && counted == hand;
        parts.push(format!("{name} {counted} (hand {hand}, target {target:.3e} ±{}%)", tol * 100.0));
    }
    // the command line reports the same total
    let mut out = Vec::new();
    let code = cli::run(["arcaps", "count-params"], None, &mut out, &mut Vec::new());
    let printed = String::from_utf8_lossy(&out).lines().last().unwrap_or_default().to_string();
    ok &= code == 0 && printed.split_whitespace().last() == Some("5275664");
    let detail = parts.join("; ");
    if ok { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- 2

fn random_baseline() -> Verdict {
    let start = Instant::now();
    let stats = align::random_baseline(32, 5, 1000, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "mean {:.4} (target 0.311 ± 0.01), std {:.4} (target 0.262 ± 0.02), {} ratios in {secs:.2}s",
        stats.mean, stats.std, stats.count
    );
    if within(stats.mean, 0.311, 0.01) && within(stats.std, 0.262, 0.02) && secs < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 3

type Build<'a> = dyn Fn(&mut Graph<f64>, &Bound<'_, f64>) -> CoreResult<NodeId> + 'a;

/// Largest relative error of `sum(weights * op(params))` for fixed random
/// weights.
fn op_error(seed: u64, params: &[(&str, Tensor<f64>)], build: &Build<'_>) -> CoreResult<f64> {
    let mut store = ParameterStore::new();
    for (name, t) in params {
        store.insert(name, ParamKind::Trainable, t.clone())?;
    }
    let shape = {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let y = build(&mut g, &b)?;
        g.shape(y)
    };
    let weights = uniform(&mut rng(seed ^ 0x77), shape.dims(), 1.0);
    let loss = |s: &ParameterStore<f64>| -> CoreResult<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let y = build(&mut g, &b)?;
        let wy = g.mul_const(y, &weights)?;
        let l = g.sum(wy)?;
        g.backward(l)?;
        Ok((g.value(l).item(), b.gradients(&g)))
    };
    let (_, analytic) = loss(&store)?;
    let report = check_gradients(&store, &analytic, 1e-3, 1e-8, |s| Ok(loss(s)?.0))?;
    Ok(report.iter().map(|r| r.relative_error).fold(0.0, f64::max))
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { 0.5 } else { v })
}

fn gradient_cases() -> CoreResult<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        let a = uniform(&mut r, &[2, 3], 1.5);
        let b = uniform(&mut r, &[2, 3], 1.5);
        out.push((
            "add/mul/tanh/sigmoid/scale",
            op_error(seed, &[("a", a.clone()), ("b", b)], &|g, p| {
                let (a, b) = (p.node("a")?, p.node("b")?);
                let s = g.add(a, b)?;
                let m = g.mul(s, a)?;
                let t = g.tanh(m)?;
                let sg = g.sigmoid(b)?;
                let x = g.add(t, sg)?;
                g.scale(x, 0.7)
            })?,
        ));
        out.push((
            "relu/reshape",
            op_error(seed, &[("a", away_from_zero(a))], &|g, p| {
                let r = g.relu(p.node("a")?)?;
                g.reshape(r, &[3, 2])
            })?,
        ));
        let x = uniform(&mut r, &[2, 3, 4], 3.0);
        for axis in 0..3 {
            out.push(("softmax", op_error(seed, &[("x", x.clone())], &move |g, p| g.softmax(p.node("x")?, axis))?));
        }
    }
    for (seed, (dims, k, stride, padding)) in [
        ([1usize, 4, 4, 2], 3, 1, Padding::Same),
        ([2, 5, 5, 1], 3, 2, Padding::Same),
        ([2, 3, 3, 2], 3, 1, Padding::Valid),
    ]
    .into_iter()
    .enumerate()
    {
        let mut r = rng(200 + seed as u64);
        let x = uniform(&mut r, &dims, 1.0);
        let kern = uniform(&mut r, &[k, k, dims[3], 2], 1.0);
        let bias = uniform(&mut r, &[2], 1.0);
        out.push((
            "conv2d",
            op_error(seed as u64, &[("x", x), ("k", kern), ("b", bias)], &move |g, p| {
                g.conv2d(p.node("x")?, p.node("k")?, Some(p.node("b")?), stride, padding)
            })?,
        ));
    }
    for (seed, (dims, n_out, stride, padding)) in [
        ([1usize, 3, 3, 2, 2], 2, 1, Padding::Same),
        ([2, 4, 4, 2, 1], 2, 2, Padding::Same),
        ([1, 3, 3, 2, 3], 2, 1, Padding::Valid),
    ]
    .into_iter()
    .enumerate()
    {
        let mut r = rng(300 + seed as u64);
        let k = if padding == Padding::Valid { dims[1] } else { 3 };
        let u = uniform(&mut r, &dims, 1.0);
        let kern = uniform(&mut r, &[n_out * dims[4], k, k, dims[3], 2], 1.0);
        let att = uniform(&mut r, &[n_out, 2, dims[4]], 1.0);
        out.push((
            "capsule transform + attention routing",
            op_error(seed as u64, &[("u", u), ("k", kern), ("w", att)], &move |g, p| {
                let st = layers::conv_transform(g, p.node("u")?, p.node("k")?, n_out, stride, padding)?;
                layers::attention_route(g, &st, p.node("w")?)
            })?,
        ));
    }
    for seed in 0..3u64 {
        let mut r = rng(400 + seed);
        let (d, n) = (2 + seed as usize % 2, 1 + seed as usize);
        let x = uniform(&mut r, &[2, 2, 2, d, n], 1.0);
        let refv = uniform(&mut r, &[d, n], 1.0);
        out.push((
            "channelwise dot",
            op_error(seed, &[("x", x.clone()), ("r", refv)], &|g, p| {
                layers::channelwise_dot3d(g, p.node("x")?, p.node("r")?)
            })?,
        ));
        let a = uniform(&mut r, &[n, d, 3], 1.0);
        let bias = uniform(&mut r, &[n, 3], 1.0);
        out.push((
            "capsule activation",
            op_error(seed, &[("x", x), ("a", a), ("b", bias)], &|g, p| {
                layers::capsule_activation(g, p.node("x")?, p.node("a")?, p.node("b")?)
            })?,
        ));
        let xd = uniform(&mut r, &[3, 4], 1.0);
        let w = uniform(&mut r, &[4, 2], 1.0);
        let bd = uniform(&mut r, &[2], 1.0);
        out.push((
            "dense",
            op_error(seed, &[("x", xd), ("w", w), ("b", bd)], &|g, p| {
                g.dense(p.node("x")?, p.node("w")?, p.node("b")?)
            })?,
        ));
        let xb = uniform(&mut r, &[3, 2, 2, 2], 2.0);
        let gamma = uniform(&mut r, &[2], 1.0);
        let beta = uniform(&mut r, &[2], 1.0);
        out.push((
            "batchnorm",
            op_error(seed, &[("x", xb), ("g", gamma), ("b", beta)], &|g, p| {
                g.batchnorm(p.node("x")?, p.node("g")?, p.node("b")?, NormStats::Batch, 1e-5)
            })?,
        ));
        let caps = uniform(&mut r, &[2, 3, 3], 1.0);
        out.push(("capsule length", op_error(seed, &[("c", caps)], &|g, p| g.capsule_length(p.node("c")?))?));
        let s = uniform(&mut r, &[3, 4], 0.5).map(|v| v + 0.5);
        let labels = [seed as usize % 4, 1, 3];
        out.push((
            "margin loss",
            op_error(seed, &[("s", s)], &move |g, p| g.margin_loss(p.node("s")?, &labels, 0.9, 0.1, 0.5))?,
        ));
        let xm = uniform(&mut r, &[2, 3], 1.0);
        let target = uniform(&mut r, &[6], 1.0);
        out.push(("mse", op_error(seed, &[("x", xm)], &move |g, p| g.mse(p.node("x")?, &target))?));
    }
    let mut r = rng(500);
    let feats = uniform(&mut r, &[2, 4, 3, 2], 1.0);
    let pk = uniform(&mut r, &[3, 3, 2, 4], 1.0);
    let pb = uniform(&mut r, &[4], 0.5);
    let pa = uniform(&mut r, &[2, 2, 2], 1.0);
    let pab = uniform(&mut r, &[2, 2], 0.5);
    out.push((
        "primary caps",
        op_error(
            0,
            &[("x", feats), ("k", pk), ("b", pb), ("a", pa), ("ab", pab)],
            &|g, p| {
                let pp = PrimaryCapsParams {
                    kernel: p.node("k")?,
                    bias: p.node("b")?,
                    act_weight: p.node("a")?,
                    act_bias: p.node("ab")?,
                };
                layers::primary_caps(g, p.node("x")?, &pp, 2, 2)
            },
        )?,
    ));
    let u = uniform(&mut r, &[2, 3, 3, 2, 2], 1.0);
    let caps_params = [
        ("u", u.clone()),
        ("k", uniform(&mut r, &[4, 3, 3, 2, 2], 0.7)),
        ("w", uniform(&mut r, &[2, 2, 2], 1.0)),
        ("a", uniform(&mut r, &[2, 2, 2], 1.0)),
        ("b", uniform(&mut r, &[2, 2], 0.5)),
    ];
    let conv_caps = |opts: ConvCapsOptions| {
        move |g: &mut Graph<f64>, p: &Bound<'_, f64>| {
            let cp = ConvCapsParams {
                transform: p.node("k")?,
                attention: p.node("w")?,
                act_weight: p.node("a")?,
                act_bias: p.node("b")?,
            };
            // a fixed seed redraws the same dropout mask on every probe
            layers::conv_caps(g, p.node("u")?, &cp, &opts, Mode::Train, &mut rng(99))
        }
    };
    let opts = ConvCapsOptions {
        out_channels: 2,
        stride: 1,
        padding: Padding::Same,
        residual: true,
        keep_prob: 0.5,
    };
    out.push(("conv caps with dropout and residual", op_error(0, &caps_params, &conv_caps(opts))?));
    let full_params = [
        ("u", u),
        ("k", uniform(&mut r, &[6, 3, 3, 2, 3], 0.7)),
        ("w", uniform(&mut r, &[3, 3, 2], 1.0)),
        ("a", uniform(&mut r, &[3, 3, 3], 1.0)),
        ("b", uniform(&mut r, &[3, 3], 0.5)),
    ];
    out.push((
        "fully conv caps",
        op_error(0, &full_params, &|g, p| {
            let cp = ConvCapsParams {
                transform: p.node("k")?,
                attention: p.node("w")?,
                act_weight: p.node("a")?,
                act_bias: p.node("b")?,
            };
            layers::fully_conv_caps(g, p.node("u")?, &cp, 3, 1.0, Mode::Infer, &mut rng(0))
        })?,
    ));
    out.push(("tiny network end to end", tiny_model_error()?));
    Ok(out)
}

fn tiny_model_error() -> CoreResult<f64> {
    let net = ArCapsNet::new(ModelConfig::tiny())?;
    let mut r = rng(600);
    let mut store: ParameterStore<f64> = net.init_params(&mut r)?;
    // move zero-initialized biases off the relu kinks
    for e in store.trainable_mut() {
        for v in e.value.data_mut() {
            *v += (r.random::<f64>() * 2.0 - 1.0) * 0.05;
        }
    }
    let c = net.config();
    let images = uniform(&mut r, &[2, c.input_width, c.input_height, c.input_channels], 0.5).map(|v| v + 0.5);
    let labels = [0, 2];
    let step = net.compute_gradients(&store, &images, &labels, &mut rng(7))?;
    let report = check_gradients(&store, &step.grads, 1e-4, 1e-8, |s| {
        Ok(net.compute_gradients(s, &images, &labels, &mut rng(7))?.loss)
    })?;
    // a bias feeding batch norm has an identically zero gradient, so only
    // roundoff is left to compare; hold those to an absolute bound instead
    let mut worst: f64 = 0.0;
    for (r, g) in report.iter().zip(&step.grads) {
        let vanishing = g.data().iter().all(|v| v.abs() < 1e-10);
        worst = worst.max(if vanishing && r.max_abs_error < 1e-8 { 0.0 } else { r.relative_error });
    }
    Ok(worst)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let cases = gradient_cases().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (worst_name, worst) = cases
        .iter()
        .fold(("", 0.0), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let detail = format!(
        "{} checks, worst relative error {worst:.2e} ({worst_name}), limit 1e-4, {secs:.1}s",
        cases.len()
    );
    if worst < 1e-4 && secs < 300.0 { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- 4

/// `t[n][m]` laid out as the `(B, W'*H', N, D, M)` stack.
fn stack_from_naive(t: &[Vec<Tensor<f64>>]) -> Tensor<f64> {
    let (n_ch, m_ch) = (t.len(), t[0].len());
    let [b, w, h, d] = t[0][0].dims().try_into().unwrap();
    let mut out = Tensor::zeros(&[b, w * h, n_ch, d, m_ch]).unwrap();
    for bi in 0..b {
        for i in 0..w {
            for j in 0..h {
                for n in 0..n_ch {
                    for k in 0..d {
                        for m in 0..m_ch {
                            out.set(&[bi, i * h + j, n, k, m], t[n][m].at(&[bi, i, j, k]));
                        }
                    }
                }
            }
        }
    }
    out
}

struct Instance {
    u: Tensor<f64>,
    kernels: Tensor<f64>,
    attention: Tensor<f64>,
    weight: Tensor<f64>,
    bias: Tensor<f64>,
    out_channels: usize,
    stride: usize,
    padding: Padding,
}

fn instance(seed: u64, full_extent: bool) -> Instance {
    let mut r = rng(seed);
    let b = 1 + r.random_range(0..2);
    let w = 2 + r.random_range(0..4);
    let h = 2 + r.random_range(0..4);
    let din = 1 + r.random_range(0..3);
    let dout = 1 + r.random_range(0..3);
    let m = 1 + r.random_range(0..3);
    let n = 1 + r.random_range(0..3);
    let (k, stride, padding) = if full_extent {
        ((w, h), 1, Padding::Valid)
    } else {
        ((3, 3), 1 + r.random_range(0..2), if r.random_bool(0.7) { Padding::Same } else { Padding::Valid })
    };
    let (w, h) = if padding == Padding::Valid && !full_extent { (w.max(3), h.max(3)) } else { (w, h) };
    Instance {
        u: uniform(&mut r, &[b, w, h, din, m], 1.0),
        kernels: uniform(&mut r, &[n * m, k.0, k.1, din, dout], 0.8),
        attention: uniform(&mut r, &[n, dout, m], 2.0),
        weight: uniform(&mut r, &[n, dout, dout], 1.0),
        bias: uniform(&mut r, &[n, dout], 0.5),
        out_channels: n,
        stride,
        padding,
    }
}

fn routing_oracles() -> Verdict {
    let start = Instant::now();
    let instances = 25;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..instances {
        let x = instance(1000 + seed, false);
        let t = naive_transform(&x.u, &x.kernels, x.out_channels, x.stride, x.padding);
        let mut g = Graph::new();
        let ui = g.input(x.u.clone());
        let ki = g.param(x.kernels.clone());
        let ai = g.param(x.attention.clone());
        let st = layers::conv_transform(&mut g, ui, ki, x.out_channels, x.stride, x.padding).map_err(|e| e.to_string())?;
        note("conv_transform", max_abs_diff(g.value(st.node).data(), stack_from_naive(&t).data()));
        let routed = layers::attention_route(&mut g, &st, ai).map_err(|e| e.to_string())?;
        let expect_route = naive_route(&t, &x.attention);
        note("attention_route", max_abs_diff(g.value(routed).data(), expect_route.data()));

        let si = g.input(expect_route.clone());
        let wi = g.param(x.weight.clone());
        let bi = g.param(x.bias.clone());
        let act = layers::capsule_activation(&mut g, si, wi, bi).map_err(|e| e.to_string())?;
        note(
            "capsule_activation",
            max_abs_diff(g.value(act).data(), naive_activation(&expect_route, &x.weight, &x.bias).data()),
        );

        let f = instance(2000 + seed, true);
        let tf = naive_transform(&f.u, &f.kernels, f.out_channels, 1, Padding::Valid);
        let expect = naive_activation(&naive_route(&tf, &f.attention), &f.weight, &f.bias);
        let mut g = Graph::new();
        let ui = g.input(f.u.clone());
        let cp = ConvCapsParams {
            transform: g.param(f.kernels.clone()),
            attention: g.param(f.attention.clone()),
            act_weight: g.param(f.weight.clone()),
            act_bias: g.param(f.bias.clone()),
        };
        let out = layers::fully_conv_caps(&mut g, ui, &cp, f.out_channels, 1.0, Mode::Infer, &mut rng(0))
            .map_err(|e| e.to_string())?;
        if g.value(out).dims() != expect.dims() {
            return Err(format!("fully_conv_caps shape {:?} vs {:?}", g.value(out).dims(), expect.dims()));
        }
        note("fully_conv_caps", max_abs_diff(g.value(out).data(), expect.data()));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{instances} instances each; max abs diff {}; {secs:.2}s",
        worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ")
    );
    if worst.values().all(|&v| v < 1e-6) && secs < 60.0 { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- 5

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        PropConfig {
            cases,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn capsule(t: &Tensor<f64>, b: usize, w: usize, h: usize, n: usize) -> Vec<f64> {
    (0..t.dims()[3]).map(|d| t.at(&[b, w, h, d, n])).collect()
}

struct Routed {
    weights: Tensor<f64>,
    output: Tensor<f64>,
}

fn route(u: &Tensor<f64>, kernels: &Tensor<f64>, attention: &Tensor<f64>, out_channels: usize) -> Routed {
    let mut g = Graph::new();
    let ui = g.input(u.clone());
    let ki = g.param(kernels.clone());
    let ai = g.param(attention.clone());
    let st = layers::conv_transform(&mut g, ui, ki, out_channels, 1, Padding::Same).unwrap();
    let (_, w) = layers::routing_weights(&mut g, &st, ai).unwrap();
    let s = layers::attention_route(&mut g, &st, ai).unwrap();
    Routed {
        weights: g.value(w).clone(),
        output: g.value(s).clone(),
    }
}

fn activate(s: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (si, wi, bi) = (g.input(s.clone()), g.param(weight.clone()), g.param(bias.clone()));
    let u = layers::capsule_activation(&mut g, si, wi, bi).unwrap();
    g.value(u).clone()
}

fn softmax_normalizes() -> Result<(), String> {
    runner(64)
        .run(&(any::<u64>(), 1usize..4, 1usize..4), |(seed, m, n)| {
            let mut r = rng(seed);
            let u = uniform(&mut r, &[2, 3, 2, 3, m], 1.0);
            let kernels = uniform(&mut r, &[n * m, 3, 3, 3, 2], 1.0);
            let attention = uniform(&mut r, &[n, 2, m], 5.0);
            let w = route(&u, &kernels, &attention, n).weights;
            for chunk in w.data().chunks_exact(m) {
                prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(chunk.iter().all(|&p| p >= 0.0));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

// pre-activations stay below 9 here; past about 19, f64 tanh rounds to 1
// and the norm can reach sqrt(D) exactly
fn tanh_bound() -> Result<(), String> {
    runner(64)
        .run(&(any::<u64>(), 1usize..9, 0.05f64..1.0), |(seed, d, scale)| {
            let mut r = rng(seed);
            let s = uniform(&mut r, &[1, 2, 2, d, 2], scale);
            let u = activate(&s, &uniform(&mut r, &[2, d, d], scale), &uniform(&mut r, &[2, d], scale));
            for cell in 0..4 {
                for n in 0..2 {
                    prop_assert!(norm(&capsule(&u, 0, cell / 2, cell % 2, n)) < (d as f64).sqrt());
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn squash_orientation() -> Result<(), String> {
    runner(64)
        .run(&(any::<u64>(), 1usize..10, 0.01f64..10.0), |(seed, d, scale)| {
            let s = uniform(&mut rng(seed), &[d], scale);
            prop_assume!(norm(s.data()) > 1e-9);
            prop_assert!(cosine(&layers::squash(s.data()), s.data()) > 1.0 - 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    // the capsule activation has no such guarantee: find a capsule it turns
    for seed in 0..100 {
        let mut r = rng(seed);
        let s = uniform(&mut r, &[1, 1, 1, 4, 1], 1.0);
        let u = activate(&s, &uniform(&mut r, &[1, 4, 4], 1.0), &uniform(&mut r, &[1, 4], 0.5));
        if cosine(u.data(), s.data()) < 0.9 {
            return Ok(());
        }
    }
    Err("no capsule whose direction the activation changes".into())
}

fn permutation_equivariance() -> Result<(), String> {
    runner(48)
        .run(&(any::<u64>(), 1usize..3), |(seed, rot)| {
            let (m, n, d) = (3, 2, 2);
            let mut r = rng(seed);
            let u = uniform(&mut r, &[1, 3, 3, d, m], 1.0);
            let kernels = uniform(&mut r, &[n * m, 3, 3, d, d], 1.0);
            let attention = uniform(&mut r, &[n, d, m], 2.0);
            let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
            let (mut u2, mut k2, mut a2) = (u.clone(), kernels.clone(), attention.clone());
            let block = 9 * d * d;
            for i in 0..m {
                for w in 0..3 {
                    for h in 0..3 {
                        for k in 0..d {
                            u2.set(&[0, w, h, k, i], u.at(&[0, w, h, k, perm[i]]));
                        }
                    }
                }
                for o in 0..n {
                    let (dst, src) = ((o * m + i) * block, (o * m + perm[i]) * block);
                    let vals = kernels.data()[src..src + block].to_vec();
                    k2.data_mut()[dst..dst + block].copy_from_slice(&vals);
                    for k in 0..d {
                        a2.set(&[o, k, i], attention.at(&[o, k, perm[i]]));
                    }
                }
            }
            let a = route(&u, &kernels, &attention, n).output;
            let b = route(&u2, &k2, &a2, n).output;
            prop_assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn locality() -> Result<(), String> {
    runner(48)
        .run(&(any::<u64>(), 0usize..5, 0usize..4), |(seed, cw, ch)| {
            let (m, n, d) = (2, 2, 2);
            let mut r = rng(seed);
            let full = uniform(&mut r, &[1, 5, 4, d, m], 1.0);
            let mut u = Tensor::zeros(&[1, 5, 4, d, m]).unwrap();
            for k in 0..d {
                for c in 0..m {
                    u.set(&[0, cw, ch, k, c], full.at(&[0, cw, ch, k, c]));
                }
            }
            let kernels = uniform(&mut r, &[n * m, 3, 3, d, d], 1.0);
            let attention = uniform(&mut r, &[n, d, m], 2.0);
            let out = route(&u, &kernels, &attention, n).output;
            for w in 0..5usize {
                for h in 0..4usize {
                    if w.abs_diff(cw) > 1 || h.abs_diff(ch) > 1 {
                        for o in 0..n {
                            prop_assert!(capsule(&out, 0, w, h, o).iter().all(|&v| v == 0.0));
                        }
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn margin_zero_conditions() -> Result<(), String> {
    let strategy = (
        proptest::collection::vec(prop_oneof![0.0f64..=1.0, Just(0.0), Just(0.1), Just(0.9), Just(1.0)], 12),
        proptest::collection::vec(0usize..4, 3),
    );
    runner(128)
        .run(&strategy, |(scores, labels)| {
            let t = Tensor::from_vec(&[3, 4], scores.clone()).unwrap();
            let mut g = Graph::new();
            let si = g.input(t);
            let l = loss::margin_loss(&mut g, si, &labels, &LossConfig::default()).unwrap();
            let value = g.value(l).item();
            let satisfied = labels.iter().enumerate().all(|(b, &label)| {
                (0..4).all(|k| {
                    let s = scores[b * 4 + k];
                    if k == label { s >= 0.9 } else { s <= 0.1 }
                })
            });
            prop_assert!(value >= 0.0);
            prop_assert_eq!(value == 0.0, satisfied);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn checkpoint_round_trip() -> Result<(), String> {
    runner(16)
        .run(&(any::<u64>(), any::<u64>(), proptest::option::of(0.0f64..1.0)), |(seed, step, acc)| {
            let model = ModelConfig::tiny();
            let params = ArCapsNet::new(model.clone()).unwrap().init_params(&mut rng_from_seed(seed)).unwrap();
            let ckpt = Checkpoint {
                model,
                state: arcaps::checkpoint::TrainState {
                    step,
                    epoch: step % 100,
                    val_accuracy: acc,
                },
                params,
            };
            let bytes = ckpt.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &ckpt);
            prop_assert_eq!(back.to_bytes(), bytes);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn invariant_suite() -> Verdict {
    type Property = fn() -> Result<(), String>;
    let checks: [(&str, Property); 7] = [
        ("softmax weights", softmax_normalizes),
        ("tanh bound", tanh_bound),
        ("squash vs activation orientation", squash_orientation),
        ("permutation equivariance", permutation_equivariance),
        ("locality", locality),
        ("margin-loss zeros", margin_zero_conditions),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let failures: Vec<String> = checks
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {}", e.lines().next().unwrap_or(""))))
        .collect();
    if failures.is_empty() {
        Ok(format!("{} properties hold", checks.len()))
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------- 6-9

struct DeskRun {
    config: RunConfig,
    best: Checkpoint,
    untrained: Checkpoint,
    test: Dataset,
    test_accuracy: f64,
    elapsed: Duration,
}

fn desk_config() -> Result<RunConfig, String> {
    let path = workspace().join("configs/desk.cfg");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    RunConfig::parse(&text).map_err(|e| e.to_string())
}

fn desk_run() -> Result<DeskRun, String> {
    let config = desk_config()?;
    let root = mnist_root();
    let start = Instant::now();
    let train_full =
        datasets::load_mnist(&root, Split::Train).map_err(|e| format!("MNIST not available: {e}"))?;
    let test = datasets::load_mnist(&root, Split::Test).map_err(|e| format!("MNIST not available: {e}"))?;
    let subset = train_full.head(config.data.train_samples);
    let (train_set, val_set) = subset.split_train_val(config.train.seed).map_err(|e| e.to_string())?;
    let opts = cli::train_options(&config);
    let run = trainer::train(&config.model, &train_set, &val_set, &opts, None, |r| {
        eprintln!("  desk epoch {:>2}: train loss {:.4}, val acc {:.4}", r.epoch, r.train_loss, r.val_accuracy);
    })
    .map_err(|e| e.to_string())?;
    let net = run.best.network().map_err(|e| e.to_string())?;
    let eval = trainer::evaluate(&net, &run.best.params, &test, config.train.workers).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let untrained = Checkpoint {
        model: config.model.clone(),
        state: Default::default(),
        params: net.init_params(&mut rng_from_seed(config.train.seed ^ 0xfeed)).map_err(|e| e.to_string())?,
    };
    Ok(DeskRun {
        best: run.best,
        untrained,
        test,
        test_accuracy: eval.accuracy,
        elapsed,
        config,
    })
}

fn desk_training(desk: &Result<DeskRun, String>) -> Verdict {
    let d = desk.as_ref().map_err(Clone::clone)?;
    let detail = format!(
        "test accuracy {:.4} (target ≥ 0.97) after {} epochs on {} images, best epoch {}, {:.1} min",
        d.test_accuracy,
        d.config.train.epochs,
        d.config.data.train_samples,
        d.best.state.epoch,
        d.elapsed.as_secs_f64() / 60.0
    );
    if d.test_accuracy >= 0.97 && d.config.train.epochs <= 10 && d.elapsed.as_secs() < 30 * 60 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const ALIGN_SAMPLES: usize = 1000;
const BASELINE_TRIALS: usize = 1000;

struct GapMeasure {
    mean: f64,
    ratio_count: usize,
    baseline_mean: f64,
    baseline_std: f64,
}

impl GapMeasure {
    fn gap(&self) -> f64 {
        self.mean - self.baseline_mean
    }
}

fn measure_gap(ckpt: &Checkpoint, test: &Dataset, seed: u64) -> Result<GapMeasure, String> {
    let net = ckpt.network().map_err(|e| e.to_string())?;
    let (indices, _) = lab::sample_indices(test.len(), ALIGN_SAMPLES, seed);
    let (report, _) =
        report::equivariance(&net, &ckpt.params, test, &indices, &Family::ALL, 1).map_err(|e| e.to_string())?;
    let baseline = align::random_baseline(net.config().class_dim, 5, BASELINE_TRIALS, seed).map_err(|e| e.to_string())?;
    Ok(GapMeasure {
        mean: report.overall().0,
        ratio_count: report.ratios.len(),
        baseline_mean: baseline.mean,
        baseline_std: baseline.std,
    })
}

fn equivariance_gap(desk: &Result<DeskRun, String>) -> Verdict {
    let d = desk.as_ref().map_err(Clone::clone)?;
    let seed = d.config.train.seed;
    let trained = measure_gap(&d.best, &d.test, seed)?;
    let untrained = measure_gap(&d.untrained, &d.test, seed)?;
    // spread of a mean of this many independent random ratios; the per-ratio
    // spread would admit every possible mean
    let sigma = untrained.baseline_std / (untrained.ratio_count as f64).sqrt();
    let detail = format!(
        "trained mean ratio {:.4} vs baseline {:.4} (D=8): gap {:.4} (needs > 0.2); untrained mean {:.4}: gap {:.4} \
         (needs |gap| ≤ 3σ = {:.4}, σ = baseline std / sqrt(ratios)); {} ratios each",
        trained.mean,
        trained.baseline_mean,
        trained.gap(),
        untrained.mean,
        untrained.gap(),
        3.0 * sigma,
        trained.ratio_count
    );
    if trained.gap() > 0.2 && untrained.gap().abs() <= 3.0 * sigma {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn perturbation_protocol(desk: &Result<DeskRun, String>) -> Verdict {
    let d = desk.as_ref().map_err(Clone::clone)?;
    let net = d.best.network().map_err(|e| e.to_string())?;
    let class_dim = net.config().class_dim;
    let root = (class_dim as f64).sqrt();
    let mut sweeps = 0;
    for class in 0..10 {
        let i = (0..d.test.len()).find(|&i| d.test.label(i) == class).ok_or("missing class")?;
        let image = d.test.image(i);
        // unperturbed reconstruction straight from the forward pass
        let mut g = Graph::new();
        let p = d.best.params.bind(&mut g);
        let x = d.test.batch_tensor(&[i]).map_err(|e| e.to_string())?;
        let fwd = net
            .forward(&mut g, &p, &x, Some(&[class]), Mode::Infer, &mut rng_from_seed(0))
            .map_err(|e| e.to_string())?;
        let plain = g.value(fwd.reconstruction).data().to_vec();
        for dim in 0..class_dim {
            let sweep = lab::perturb_and_decode(&net, &d.best.params, image, d.test.dims(), Some(class), dim)
                .map_err(|e| e.to_string())?;
            if sweep.reconstructions.len() != 11 {
                return Err(format!("{} reconstructions for class {class} dim {dim}", sweep.reconstructions.len()));
            }
            for (k, &o) in sweep.offsets.iter().enumerate() {
                let expected = (k as f64 - 5.0) * 0.05 * root;
                if (o - expected).abs() > 1e-12 {
                    return Err(format!("offset {k} is {o}, expected {expected}"));
                }
            }
            let zero = &sweep.reconstructions[5];
            if zero.iter().map(|v| v.to_bits()).ne(plain.iter().map(|v| v.to_bits())) {
                return Err(format!("zero-offset tile differs from the reconstruction (class {class}, dim {dim})"));
            }
            sweeps += 1;
        }
    }
    // the command line writes one 11-tile strip per (class, dimension)
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("best.ckpt");
    d.best.save(&ckpt).map_err(|e| e.to_string())?;
    let cfg = dir.path().join("perturb.cfg");
    let text = format!(
        "{}data.root = {}\ndata.test_samples = 200\nanalyze.dims = 0,7\nanalyze.perturb_classes = 10\n",
        fs::read_to_string(workspace().join("configs/desk.cfg")).map_err(|e| e.to_string())?,
        mnist_root().display()
    );
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let args = [
        "arcaps",
        "analyze-perturb",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ];
    let mut err = Vec::new();
    if cli::run(args, None, &mut Vec::new(), &mut err) != 0 {
        return Err(String::from_utf8_lossy(&err).into_owned());
    }
    let header = b"P5\n308 28\n255\n";
    let mut strips = 0;
    for class in 0..10 {
        for dim in [0, 7] {
            let bytes = fs::read(out.join(format!("perturb_class{class}_dim{dim}.pgm"))).map_err(|e| e.to_string())?;
            if !bytes.starts_with(header) || bytes.len() != header.len() + 11 * 28 * 28 {
                return Err(format!("strip for class {class} dim {dim} is not 11 tiles of 28x28"));
            }
            strips += 1;
        }
    }
    Ok(format!(
        "{sweeps} sweeps of 11 offsets k·0.05·sqrt({class_dim}), k = -5..5, zero tile bitwise equal; {strips} CLI strips"
    ))
}

/// Every file under `dir`, with the wall-time column of the metrics file
/// removed.
fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        let name = e.file_name().to_string_lossy().into_owned();
        let mut bytes = fs::read(e.path()).map_err(|e| e.to_string())?;
        if name == "metrics.csv" {
            let text = String::from_utf8_lossy(&bytes).into_owned();
            bytes = text
                .lines()
                .map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a))
                .collect::<Vec<_>>()
                .join("\n")
                .into_bytes();
        }
        out.insert(name, bytes);
    }
    Ok(out)
}

fn determinism() -> Verdict {
    let root = mnist_root();
    if !root.join("train-images-idx3-ubyte").exists() {
        return Err(format!("MNIST not available under {}", root.display()));
    }
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = base.path().join("det.cfg");
    let text = format!(
        "{}data.root = {}\ndata.train_samples = 1000\ndata.test_samples = 300\ntrain.epochs = 1\n\
         train.workers = 1\nanalyze.samples = 40\nanalyze.dims = 0\nanalyze.perturb_classes = 3\n",
        fs::read_to_string(workspace().join("configs/desk.cfg")).map_err(|e| e.to_string())?,
        root.display()
    );
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let out = base.path().join("run");
    let mut runs = Vec::new();
    for _ in 0..2 {
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
        }
        for cmd in ["train", "eval", "analyze-align", "analyze-perturb"] {
            let args = ["arcaps", cmd, "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--seed", "11"];
            let mut err = Vec::new();
            if cli::run(args, None, &mut Vec::new(), &mut err) != 0 {
                return Err(format!("{cmd}: {}", String::from_utf8_lossy(&err).trim()));
            }
        }
        runs.push(artifacts(&out)?);
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let detail = format!("{} artifacts compared after train/eval/analyze-align/analyze-perturb", runs[0].len());
    if differing.is_empty() && runs[0].len() == runs[1].len() {
        Ok(detail)
    } else {
        Err(format!("{detail}; differing: {differing:?}"))
    }
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `cargo test -- 3 5` runs only the listed criteria; other arguments
    // from the test driver are ignored
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u8| only.is_empty() || only.contains(&n);
    let mut lines = Vec::new();
    let mut record = |n: u8, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let verdict = guarded(f);
        let secs = start.elapsed().as_secs_f64();
        let line = match &verdict {
            Ok(d) => format!("criterion {n} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => format!("criterion {n} FAIL  {name}: {d} [{secs:.1}s]"),
        };
        println!("{line}");
        lines.push(verdict.is_ok());
    };
    record(1, "parameter counts", &mut parameter_counts);
    record(2, "random alignment baseline", &mut random_baseline);
    record(3, "gradient suite", &mut gradient_suite);
    record(4, "routing oracles", &mut routing_oracles);
    record(5, "invariant suite", &mut invariant_suite);
    let run = if [6, 7, 8].into_iter().any(wanted) {
        panic::catch_unwind(desk_run).unwrap_or_else(|_| Err("desk training panicked".into()))
    } else {
        Err("not run".into())
    };
    record(6, "desk-scale training", &mut || desk_training(&run));
    record(7, "equivariance gap", &mut || equivariance_gap(&run));
    record(8, "perturbation protocol", &mut || perturbation_protocol(&run));
    record(9, "determinism", &mut determinism);
    let passed = lines.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
}
