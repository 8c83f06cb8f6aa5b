#![allow(dead_code, clippy::needless_range_loop)]

use arcaps_core::autodiff::Padding;
use arcaps_core::{rng_from_seed, Rng, Tensor};
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    rng_from_seed(seed)
}

pub fn uniform(rng: &mut Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::from_vec(dims, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Output extent and leading pad of one axis.
pub fn extent(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, i64) {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, (total / 2) as i64)
        }
        Padding::Valid => ((input - k) / stride + 1, 0),
    }
}

/// Direct cross-correlation of `(B, W, H, Cin)` with `(kw, kh, Cin, Cout)`.
pub fn naive_conv(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: Padding,
) -> Tensor<f64> {
    let [b, w, h, cin] = x.dims().try_into().unwrap();
    let [kw, kh, _, cout] = k.dims().try_into().unwrap();
    let (ow, pw) = extent(w, kw, stride, padding);
    let (oh, ph) = extent(h, kh, stride, padding);
    let mut out = Tensor::zeros(&[b, ow, oh, cout]).unwrap();
    for bi in 0..b {
        for i in 0..ow {
            for j in 0..oh {
                for co in 0..cout {
                    let mut s = bias.map_or(0.0, |t| t.data()[co]);
                    for di in 0..kw {
                        for dj in 0..kh {
                            let xi = (i * stride + di) as i64 - pw;
                            let xj = (j * stride + dj) as i64 - ph;
                            if xi < 0 || xj < 0 || xi >= w as i64 || xj >= h as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.at(&[bi, xi as usize, xj as usize, ci]) * k.at(&[di, dj, ci, co]);
                            }
                        }
                    }
                    out.set(&[bi, i, j, co], s);
                }
            }
        }
    }
    out
}

/// Channel `m` of a `(B, W, H, D, M)` capsule tensor as a `(B, W, H, D)`
/// feature map.
pub fn capsule_channel(u: &Tensor<f64>, m: usize) -> Tensor<f64> {
    let [b, w, h, d, mm] = u.dims().try_into().unwrap();
    let data = u.data().chunks_exact(mm).map(|c| c[m]).collect();
    Tensor::from_vec(&[b, w, h, d], data).unwrap()
}

/// Kernel `(n, m)` of a `(N*M, kw, kh, Din, Dout)` transform stack.
pub fn transform_kernel(k: &Tensor<f64>, n: usize, m: usize, in_channels: usize) -> Tensor<f64> {
    let [_, kw, kh, din, dout] = k.dims().try_into().unwrap();
    let size = kw * kh * din * dout;
    let i = n * in_channels + m;
    Tensor::from_vec(&[kw, kh, din, dout], k.data()[i * size..(i + 1) * size].to_vec()).unwrap()
}

/// Transformed capsules `(B, W', H', D, N, M)` built channel pair by channel
/// pair with [`naive_conv`].
pub fn naive_transform(
    u: &Tensor<f64>,
    kernels: &Tensor<f64>,
    out_channels: usize,
    stride: usize,
    padding: Padding,
) -> Vec<Vec<Tensor<f64>>> {
    let m_ch = u.dims()[4];
    (0..out_channels)
        .map(|n| {
            (0..m_ch)
                .map(|m| {
                    naive_conv(
                        &capsule_channel(u, m),
                        &transform_kernel(kernels, n, m, m_ch),
                        None,
                        stride,
                        padding,
                    )
                })
                .collect()
        })
        .collect()
}

/// Attention routing written as plain loops over the transformed capsules
/// `t[n][m]` of shape `(B, W', H', D)`: logits, softmax over `m`, weighted
/// sum. Returns `(B, W', H', D, N)`.
pub fn naive_route(t: &[Vec<Tensor<f64>>], attention: &Tensor<f64>) -> Tensor<f64> {
    let n_ch = t.len();
    let m_ch = t[0].len();
    let [b, w, h, d] = t[0][0].dims().try_into().unwrap();
    let mut out = Tensor::zeros(&[b, w, h, d, n_ch]).unwrap();
    for bi in 0..b {
        for i in 0..w {
            for j in 0..h {
                for n in 0..n_ch {
                    let mut logits = vec![0.0; m_ch];
                    for (m, l) in logits.iter_mut().enumerate() {
                        for k in 0..d {
                            *l += t[n][m].at(&[bi, i, j, k]) * attention.at(&[n, k, m]);
                        }
                    }
                    let top = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for k in 0..d {
                        let mut s = 0.0;
                        for m in 0..m_ch {
                            s += e[m] / z * t[n][m].at(&[bi, i, j, k]);
                        }
                        out.set(&[bi, i, j, k, n], s);
                    }
                }
            }
        }
    }
    out
}

/// `tanh(s_n A_n + b_n)` per capsule, as loops.
pub fn naive_activation(s: &Tensor<f64>, a: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let dims = s.dims().to_vec();
    let r = dims.len();
    let (din, n_ch) = (dims[r - 2], dims[r - 1]);
    let dout = a.dims()[2];
    let rows = s.len() / (din * n_ch);
    let mut out_dims = dims.clone();
    out_dims[r - 2] = dout;
    let mut out = vec![0.0; rows * dout * n_ch];
    for row in 0..rows {
        for n in 0..n_ch {
            for o in 0..dout {
                let mut v = bias.at(&[n, o]);
                for i in 0..din {
                    v += s.data()[(row * din + i) * n_ch + n] * a.at(&[n, i, o]);
                }
                out[(row * dout + o) * n_ch + n] = v.tanh();
            }
        }
    }
    Tensor::from_vec(&out_dims, out).unwrap()
}
