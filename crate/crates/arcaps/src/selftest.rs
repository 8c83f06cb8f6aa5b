//! Quick numerical self-checks: finite-difference gradients of a tiny
//! network, a loop implementation of one conv caps layer, the parameter
//! count of the MNIST network and the alignment direction's optimality.

use arcaps_core::align;
use arcaps_core::autodiff::{Graph, Mode, Padding};
use arcaps_core::gradcheck::check_gradients;
use arcaps_core::layers::{self, ConvCapsOptions, ConvCapsParams};
use arcaps_core::model::{ArCapsNet, ModelConfig};
use arcaps_core::params::ParameterStore;
use arcaps_core::tensor::Tensor;
use arcaps_core::{rng_from_seed, Rng};
use rand::Rng as _;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    /// Measured discrepancy.
    pub value: f64,
    /// Largest acceptable discrepancy.
    pub limit: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.value <= self.limit
    }
}

pub fn run() -> Result<Vec<SelfCheck>> {
    Ok(vec![gradients()?, conv_caps_loops()?, parameter_count()?, alignment()?])
}

fn uniform(rng: &mut Rng, dims: &[usize], scale: f64) -> Result<Tensor<f64>> {
    let n = dims.iter().product();
    Ok(Tensor::from_vec(dims, (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect())?)
}

fn gradients() -> Result<SelfCheck> {
    let net = ArCapsNet::new(ModelConfig::tiny())?;
    let mut rng = rng_from_seed(1);
    let mut store: ParameterStore<f64> = net.init_params(&mut rng)?;
    // zero-initialized biases put some relu inputs exactly on the kink,
    // where central differences see half a slope
    for e in store.trainable_mut() {
        for v in e.value.data_mut() {
            *v += (rng.random::<f64>() * 2.0 - 1.0) * 0.05;
        }
    }
    let c = net.config();
    let images = uniform(&mut rng, &[3, c.input_width, c.input_height, c.input_channels], 1.0)?.map(f64::abs);
    let labels = [0, 2, 1];
    let step = net.compute_gradients(&store, &images, &labels, &mut rng_from_seed(2))?;
    // larger steps cross relu kinks, smaller ones drown in roundoff
    let report = check_gradients(&store, &step.grads, 1e-4, 1e-8, |s| {
        Ok(net.compute_gradients(s, &images, &labels, &mut rng_from_seed(2))?.loss)
    })?;
    Ok(SelfCheck {
        name: "gradients of the tiny network (relative error)",
        value: report.iter().map(|r| r.relative_error).fold(0.0, f64::max),
        limit: 1e-4,
    })
}

/// One stride-1 conv caps layer with same padding, as nested loops.
fn loop_conv_caps(
    u: &Tensor<f64>,
    kernels: &Tensor<f64>,
    attention: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
) -> Tensor<f64> {
    let [b, w, h, din, m_ch] = [u.dims()[0], u.dims()[1], u.dims()[2], u.dims()[3], u.dims()[4]];
    let (n_ch, dout) = (attention.dims()[0], attention.dims()[1]);
    let mut out = vec![0.0; b * w * h * dout * n_ch];
    for bi in 0..b {
        for i in 0..w {
            for j in 0..h {
                for n in 0..n_ch {
                    let mut pred = vec![vec![0.0; dout]; m_ch];
                    for (m, p) in pred.iter_mut().enumerate() {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (x, y) = (i as i64 + di as i64 - 1, j as i64 + dj as i64 - 1);
                                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                                    continue;
                                }
                                for a in 0..din {
                                    let v = u.at(&[bi, x as usize, y as usize, a, m]);
                                    for (o, po) in p.iter_mut().enumerate() {
                                        *po += v * kernels.at(&[n * m_ch + m, di, dj, a, o]);
                                    }
                                }
                            }
                        }
                    }
                    let logits: Vec<f64> = (0..m_ch)
                        .map(|m| (0..dout).map(|o| pred[m][o] * attention.at(&[n, o, m])).sum())
                        .collect();
                    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let s: Vec<f64> = (0..dout).map(|o| (0..m_ch).map(|m| e[m] / z * pred[m][o]).sum()).collect();
                    for o in 0..dout {
                        let a: f64 = bias.at(&[n, o]) + (0..dout).map(|k| s[k] * weight.at(&[n, k, o])).sum::<f64>();
                        out[((((bi * w + i) * h + j) * dout) + o) * n_ch + n] = a.tanh();
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, w, h, dout, n_ch], out).expect("consistent extents")
}

fn conv_caps_loops() -> Result<SelfCheck> {
    let mut rng = rng_from_seed(3);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (m_ch, n_ch, din, dout) = (3, 2, 2, 3);
        let u = uniform(&mut rng, &[2, 4, 3, din, m_ch], 1.0)?;
        let kernels = uniform(&mut rng, &[n_ch * m_ch, 3, 3, din, dout], 0.7)?;
        let attention = uniform(&mut rng, &[n_ch, dout, m_ch], 2.0)?;
        let weight = uniform(&mut rng, &[n_ch, dout, dout], 1.0)?;
        let bias = uniform(&mut rng, &[n_ch, dout], 0.5)?;
        let mut g = Graph::new();
        let ui = g.input(u.clone());
        let p = ConvCapsParams {
            transform: g.param(kernels.clone()),
            attention: g.param(attention.clone()),
            act_weight: g.param(weight.clone()),
            act_bias: g.param(bias.clone()),
        };
        let opts = ConvCapsOptions {
            out_channels: n_ch,
            stride: 1,
            padding: Padding::Same,
            residual: false,
            keep_prob: 1.0,
        };
        let out = layers::conv_caps(&mut g, ui, &p, &opts, Mode::Infer, &mut rng)?;
        let expect = loop_conv_caps(&u, &kernels, &attention, &weight, &bias);
        let diff = g
            .value(out)
            .data()
            .iter()
            .zip(expect.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    Ok(SelfCheck {
        name: "conv caps layer against nested loops (max abs difference)",
        value: worst,
        limit: 1e-9,
    })
}

fn parameter_count() -> Result<SelfCheck> {
    // stems 768 + 37,056, primary 76,032, conv caps 305,408,
    // class caps 4,027,200, decoder 829,200
    let expected = 5_275_664.0;
    let total = ArCapsNet::new(ModelConfig::mnist())?.count_parameters().total as f64;
    Ok(SelfCheck {
        name: "MNIST network parameter count (absolute difference)",
        value: (total - expected).abs(),
        limit: 0.0,
    })
}

fn alignment() -> Result<SelfCheck> {
    let mut rng = rng_from_seed(4);
    let (rows, dim) = (5, 16);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v: Vec<f64> = (0..rows * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let a = align::align_vector(&v, dim)?;
        let energy = |w: &[f64]| v.chunks_exact(dim).map(|r| align::dot(r, w).powi(2)).sum::<f64>();
        let best = energy(&a.direction);
        for _ in 0..50 {
            let mut w: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let n = align::norm(&w);
            w.iter_mut().for_each(|x| *x /= n);
            worst = worst.max(energy(&w) - best);
        }
    }
    Ok(SelfCheck {
        name: "alignment direction optimality (largest energy excess of random directions)",
        value: worst.max(0.0),
        limit: 1e-8,
    })
}
