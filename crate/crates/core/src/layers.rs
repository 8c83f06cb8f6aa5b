//! Capsule layer algebra: primary caps, capsule activation, convolutional
//! transform, attention routing and the conv caps composites, plus the
//! squash nonlinearities kept for comparison.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Mode, NodeId, Padding};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn norm<T: Real>(s: &[T]) -> T {
    s.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `|s|^2 / (1 + |s|^2) * s / |s|`; the zero vector maps to itself.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    let n = norm(s);
    if n == T::zero() {
        return s.iter().map(|_| T::zero()).collect();
    }
    let f = n / (T::one() + n * n);
    s.iter().map(|&x| x * f).collect()
}

/// `(1 - exp(-|s|)) * s / |s|`; the zero vector maps to itself.
pub fn squash_variant<T: Real>(s: &[T]) -> Vec<T> {
    let n = norm(s);
    if n == T::zero() {
        return s.iter().map(|_| T::zero()).collect();
    }
    let f = (T::one() - (-n).exp()) / n;
    s.iter().map(|&x| x * f).collect()
}

/// Inverted dropout: survivors are scaled by `1 / keep_prob`. Identity in
/// infer mode or with `keep_prob == 1`.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: NodeId,
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!("dropout keep probability {keep_prob} not in (0, 1]")));
    }
    if mode == Mode::Infer || keep_prob == 1.0 {
        return Ok(x);
    }
    let scale = T::of(1.0 / keep_prob);
    let shape = g.shape(x);
    let mask: Vec<T> = (0..shape.numel())
        .map(|_| {
            if rng.random::<f64>() < keep_prob {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mask = Tensor::from_vec(shape.dims(), mask)?;
    g.mul_const(x, &mask)
}

/// Per-channel affine map followed by `tanh`.
///
/// `s` is `(B, W, H, D, N)`; `weight` is `(N, D, D')` and `bias` `(N, D')`.
/// Each output capsule depends only on the input capsule at the same location
/// and channel.
pub fn capsule_activation<T: Real>(
    g: &mut Graph<T>,
    s: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let a = g.capsule_affine(s, weight, bias)?;
    g.tanh(a)
}

/// Trainable tensors of a primary caps layer.
#[derive(Debug, Clone, Copy)]
pub struct PrimaryCapsParams {
    /// `(3, 3, C, D*N)`; output column `d*N + n` feeds capsule channel `n`.
    pub kernel: NodeId,
    pub bias: NodeId,
    pub act_weight: NodeId,
    pub act_bias: NodeId,
}

/// `N` stride-2 convolutions of the stem features, one per capsule channel,
/// then ReLU and capsule activation. Output `(B, ceil(W/2), ceil(H/2), D, N)`.
pub fn primary_caps<T: Real>(
    g: &mut Graph<T>,
    features: NodeId,
    p: &PrimaryCapsParams,
    dim: usize,
    channels: usize,
) -> Result<NodeId> {
    let ks = g.shape(p.kernel);
    if ks.rank() != 4 || ks.dim(3) != dim * channels {
        return Err(Error::Config(format!(
            "primary caps kernel {ks} does not produce {channels} channels of {dim}-dim capsules"
        )));
    }
    let conv = g.conv2d(features, p.kernel, Some(p.bias), 2, Padding::Same)?;
    let conv = g.relu(conv)?;
    let cs = g.shape(conv);
    let caps = g.reshape(conv, &[cs.dim(0), cs.dim(1), cs.dim(2), dim, channels])?;
    capsule_activation(g, caps, p.act_weight, p.act_bias)
}

/// Output of the convolutional transform: for every output location and
/// output channel `n`, the `D x M` block of transformed capsules
/// (tensor shape `(B, W'*H', N, D, M)`).
#[derive(Debug, Clone, Copy)]
pub struct TransformedStack {
    pub node: NodeId,
    pub out_w: usize,
    pub out_h: usize,
}

/// Convolves every input capsule channel `m` with its own kernel for each
/// output channel `n`. No bias.
pub fn conv_transform<T: Real>(
    g: &mut Graph<T>,
    u: NodeId,
    kernels: NodeId,
    out_channels: usize,
    stride: usize,
    padding: Padding,
) -> Result<TransformedStack> {
    let (node, out_w, out_h) = g.capsule_transform(u, kernels, out_channels, stride, padding)?;
    Ok(TransformedStack { node, out_w, out_h })
}

/// Attention routing: per location and output channel `n`, logits
/// `b_m = <s_m, w_n[:, m]>`, weights `c = softmax_m(b)`, output
/// `sum_m c_m s_m`. Returns pre-activation capsules `(B, W', H', D, N)`.
///
/// `attention` has shape `(N, D, M)`.
pub fn attention_route<T: Real>(
    g: &mut Graph<T>,
    stack: &TransformedStack,
    attention: NodeId,
) -> Result<NodeId> {
    let (_, weights) = routing_weights(g, stack, attention)?;
    let s = g.weighted_channel_sum(stack.node, weights)?;
    let ss = g.shape(stack.node);
    g.reshape(s, &[ss.dim(0), stack.out_w, stack.out_h, ss.dim(3), ss.dim(2)])
}

/// Logits `(B, P, N, M)` and their softmax over `M`.
pub fn routing_weights<T: Real>(
    g: &mut Graph<T>,
    stack: &TransformedStack,
    attention: NodeId,
) -> Result<(NodeId, NodeId)> {
    let logits = g.channelwise_dot(stack.node, attention)?;
    let weights = g.softmax(logits, 3)?;
    Ok((logits, weights))
}

/// Depthwise contraction of `(B, W, H, D, N)` capsules with a `(D, N)`
/// reference: `out[b,w,h,n] = sum_d input[b,w,h,d,n] * reference[d,n]`.
pub fn channelwise_dot3d<T: Real>(g: &mut Graph<T>, input: NodeId, reference: NodeId) -> Result<NodeId> {
    let xs = g.shape(input);
    let rs = g.shape(reference);
    if xs.rank() != 5 || rs.rank() != 2 || rs.dim(0) != xs.dim(3) || rs.dim(1) != xs.dim(4) {
        return Err(Error::Config(format!(
            "channelwise dot: reference {rs} does not match capsules {xs}"
        )));
    }
    let (b, w, h, d, n) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3), xs.dim(4));
    let x = g.reshape(input, &[b, w * h, 1, d, n])?;
    let r = g.reshape(reference, &[1, d, n])?;
    let out = g.channelwise_dot(x, r)?;
    g.reshape(out, &[b, w, h, n])
}

/// Trainable tensors of a conv caps or fully conv caps layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvCapsParams {
    /// `(N*M, kw, kh, Din, Dout)`.
    pub transform: NodeId,
    /// `(N, Dout, M)`.
    pub attention: NodeId,
    pub act_weight: NodeId,
    pub act_bias: NodeId,
}

/// Shape options of one conv caps layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvCapsOptions {
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
    /// Adds the layer input to the routed capsules before activation.
    pub residual: bool,
    pub keep_prob: f64,
}

/// Dropout, convolutional transform, attention routing, optional residual
/// add and capsule activation.
pub fn conv_caps<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    u: NodeId,
    p: &ConvCapsParams,
    opts: &ConvCapsOptions,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    let dropped = dropout(g, u, opts.keep_prob, mode, rng)?;
    let stack = conv_transform(g, dropped, p.transform, opts.out_channels, opts.stride, opts.padding)?;
    let mut s = attention_route(g, &stack, p.attention)?;
    if opts.residual {
        let (us, ss) = (g.shape(u), g.shape(s));
        if us != ss {
            return Err(Error::Config(format!(
                "residual connection needs equal shapes, layer input {us} vs output {ss}"
            )));
        }
        s = g.add(s, u)?;
    }
    capsule_activation(g, s, p.act_weight, p.act_bias)
}

/// Output capsule layer: the transform kernel spans the whole input spatially
/// (valid padding), so the result is `(B, 1, 1, D, N)`.
pub fn fully_conv_caps<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    u: NodeId,
    p: &ConvCapsParams,
    out_channels: usize,
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    let (us, ks) = (g.shape(u), g.shape(p.transform));
    if us.rank() != 5 || ks.rank() != 5 || ks.dim(1) != us.dim(1) || ks.dim(2) != us.dim(2) {
        return Err(Error::Config(format!(
            "fully conv caps kernel {ks} must span the input capsules {us} spatially"
        )));
    }
    let opts = ConvCapsOptions {
        out_channels,
        stride: 1,
        padding: Padding::Valid,
        residual: false,
        keep_prob,
    };
    conv_caps(g, u, p, &opts, mode, rng)
}
