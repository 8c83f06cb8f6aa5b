use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{col2im, im2col, ConvGeom, InputView, Padding};
use super::{accumulate, accumulate_with, Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatLayout};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Where a batchnorm node takes its normalization statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Statistics of the current batch (train mode).
    Batch,
    /// Fixed running statistics (infer mode).
    Running { mean: &'a [T], var: &'a [T] },
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, lhs: a, rhs: b })
    }
}

fn rank_is(op: &'static str, s: Shape, rank: usize) -> Result<()> {
    if s.rank() == rank {
        Ok(())
    } else {
        Err(Error::Config(format!("{op} expects a rank-{rank} tensor, got shape {s}")))
    }
}

fn map_unary<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    t.map(f)
}

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        self.check_node(a)?;
        let v = self.value(a).clone().reshape(dims)?;
        Ok(self.derived(v, Op::Reshape(a)))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.derived(v, Op::Add(a, b)))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::from_parts(self.shape(a), data);
        Ok(self.derived(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        self.check_node(a)?;
        let v = map_unary(self.value(a), |x| x * factor);
        Ok(self.derived(v, Op::Scale(a, factor)))
    }

    /// Multiplies by a constant tensor of the same shape (masks, dropout).
    pub fn mul_const(&mut self, a: NodeId, factor: &Tensor<T>) -> Result<NodeId> {
        self.check_node(a)?;
        same_shape("mul_const", self.shape(a), factor.shape())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(factor.data())
            .map(|(&x, &f)| x * f)
            .collect();
        let v = Tensor::from_parts(self.shape(a), data);
        Ok(self.derived(
            v,
            Op::MulConst {
                input: a,
                factor: factor.data().to_vec(),
            },
        ))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        let v = map_unary(self.value(a), |x| x.tanh());
        Ok(self.derived(v, Op::Tanh(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        let v = map_unary(self.value(a), |x| if x > T::zero() { x } else { T::zero() });
        Ok(self.derived(v, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        let v = map_unary(self.value(a), |x| T::one() / (T::one() + (-x).exp()));
        Ok(self.derived(v, Op::Sigmoid(a)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        let s: T = self.value(a).data().iter().copied().sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(a)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_node(a)?;
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.rank() {
            return Err(Error::Config(format!("softmax axis {axis} out of range for shape {shape}")));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out = vec![T::zero(); x.len()];
        let xd = x.data();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..len {
                    max = max.max(xd[idx(i)]);
                }
                let mut total = T::zero();
                for i in 0..len {
                    let e = (xd[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let v = Tensor::from_parts(shape, out);
        Ok(self.derived(v, Op::Softmax { input: a, axis }))
    }

    /// 2D cross-correlation of `(B, W, H, Cin)` with a `(kw, kh, Cin, Cout)`
    /// kernel and optional `(Cout)` bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.check_node(input)?;
        self.check_node(kernel)?;
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        rank_is("conv2d input", xs, 4)?;
        rank_is("conv2d kernel", ks, 4)?;
        if xs.dim(3) != ks.dim(2) {
            return Err(Error::Config(format!(
                "conv2d: input {xs} has {} channels but kernel {ks} expects {}",
                xs.dim(3),
                ks.dim(2)
            )));
        }
        let cout = ks.dim(3);
        if let Some(b) = bias {
            self.check_node(b)?;
            let bs = self.shape(b);
            if bs.dims() != [cout] {
                return Err(Error::Config(format!("conv2d: bias {bs} does not match kernel {ks}")));
            }
        }
        let g = ConvGeom::new(xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3), ks.dim(0), ks.dim(1), stride, padding)?;
        let mut cols = vec![T::zero(); g.rows() * g.patch()];
        im2col(self.value(input).data(), InputView::dense(&g), &g, &mut cols);
        let mut out = vec![T::zero(); g.rows() * cout];
        gemm(
            g.rows(),
            g.patch(),
            cout,
            &cols,
            MatLayout::row_major(g.patch()),
            self.value(kernel).data(),
            MatLayout::row_major(cout),
            &mut out,
            MatLayout::row_major(cout),
            false,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let v = Tensor::from_vec(&[g.batch, g.out_w, g.out_h, cout], out)?;
        Ok(self.derived(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom: g,
                cols,
            },
        ))
    }

    /// Per-channel-pair convolution of capsules.
    ///
    /// `input` is `(B, W, H, Din, M)`, `kernels` is `(N*M, kw, kh, Din, Dout)`
    /// with kernel `n*M + m` mapping input channel `m` to output channel `n`.
    /// The result is `(B, W'*H', N, Dout, M)`: for every output location and
    /// output channel, the `Dout x M` block of transformed capsules.
    pub fn capsule_transform(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<(NodeId, usize, usize)> {
        self.check_node(input)?;
        self.check_node(kernels)?;
        let xs = self.shape(input);
        let ks = self.shape(kernels);
        rank_is("capsule transform input", xs, 5)?;
        rank_is("capsule transform kernels", ks, 5)?;
        let (batch, w, h, din, m_ch) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3), xs.dim(4));
        if ks.dim(0) != out_channels * m_ch || ks.dim(3) != din {
            return Err(Error::Config(format!(
                "capsule transform: kernels {ks} do not fit input {xs} with {out_channels} output channels"
            )));
        }
        let dout = ks.dim(4);
        let g = ConvGeom::new(batch, w, h, din, ks.dim(1), ks.dim(2), stride, padding)?;
        let patch = g.patch();
        let rows = g.rows();
        let row_stride = out_channels * dout * m_ch;
        let mut out = vec![T::zero(); rows * row_stride];
        let x = self.value(input).data();
        let kd = self.value(kernels).data();
        let mut all_cols = Vec::with_capacity(m_ch);
        for m in 0..m_ch {
            let view = channel_view(&g, m, m_ch);
            let mut cols = vec![T::zero(); rows * patch];
            im2col(x, view, &g, &mut cols);
            for n in 0..out_channels {
                gemm(
                    rows,
                    patch,
                    dout,
                    &cols,
                    MatLayout::row_major(patch),
                    kd,
                    MatLayout::row_major(dout).at((n * m_ch + m) * patch * dout),
                    &mut out,
                    MatLayout {
                        offset: n * dout * m_ch + m,
                        row_stride,
                        col_stride: m_ch,
                    },
                    false,
                );
            }
            all_cols.push(cols);
        }
        let v = Tensor::from_vec(&[batch, g.out_w * g.out_h, out_channels, dout, m_ch], out)?;
        let id = self.derived(
            v,
            Op::CapsuleTransform {
                input,
                kernels,
                geom: g,
                in_channels: m_ch,
                out_channels,
                out_dim: dout,
                cols: all_cols,
            },
        );
        Ok((id, g.out_w, g.out_h))
    }

    /// `out[b,p,k,m] = sum_d input[b,p,k,d,m] * reference[k,d,m]` for input
    /// `(B, P, K, D, M)` and reference `(K, D, M)`.
    pub fn channelwise_dot(&mut self, input: NodeId, reference: NodeId) -> Result<NodeId> {
        self.check_node(input)?;
        self.check_node(reference)?;
        let xs = self.shape(input);
        let rs = self.shape(reference);
        rank_is("channelwise dot input", xs, 5)?;
        if rs.rank() != 3 || rs.dims() != &xs.dims()[2..] {
            return Err(Error::Config(format!(
                "channelwise dot: reference {rs} does not match capsule block of input {xs}"
            )));
        }
        let (b, p, k, d, m) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3), xs.dim(4));
        let x = self.value(input).data();
        let r = self.value(reference).data();
        let mut out = vec![T::zero(); b * p * k * m];
        for bp in 0..b * p {
            for kk in 0..k {
                let xb = &x[(bp * k + kk) * d * m..(bp * k + kk + 1) * d * m];
                let rb = &r[kk * d * m..(kk + 1) * d * m];
                let ob = &mut out[(bp * k + kk) * m..(bp * k + kk + 1) * m];
                for dd in 0..d {
                    for mm in 0..m {
                        ob[mm] += xb[dd * m + mm] * rb[dd * m + mm];
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[b, p, k, m], out)?;
        Ok(self.derived(v, Op::ChannelwiseDot { input, reference }))
    }

    /// `out[b,p,d,k] = sum_m weights[b,p,k,m] * stack[b,p,k,d,m]` for stack
    /// `(B, P, K, D, M)` and weights `(B, P, K, M)`.
    pub fn weighted_channel_sum(&mut self, stack: NodeId, weights: NodeId) -> Result<NodeId> {
        self.check_node(stack)?;
        self.check_node(weights)?;
        let ss = self.shape(stack);
        let ws = self.shape(weights);
        rank_is("weighted channel sum stack", ss, 5)?;
        let (b, p, k, d, m) = (ss.dim(0), ss.dim(1), ss.dim(2), ss.dim(3), ss.dim(4));
        if ws.dims() != [b, p, k, m] {
            return Err(Error::Config(format!(
                "weighted channel sum: weights {ws} do not match stack {ss}"
            )));
        }
        let s = self.value(stack).data();
        let c = self.value(weights).data();
        let mut out = vec![T::zero(); b * p * d * k];
        for bp in 0..b * p {
            for kk in 0..k {
                let sb = &s[(bp * k + kk) * d * m..(bp * k + kk + 1) * d * m];
                let cb = &c[(bp * k + kk) * m..(bp * k + kk + 1) * m];
                for dd in 0..d {
                    let mut acc = T::zero();
                    for mm in 0..m {
                        acc += cb[mm] * sb[dd * m + mm];
                    }
                    out[(bp * d + dd) * k + kk] = acc;
                }
            }
        }
        let v = Tensor::from_vec(&[b, p, d, k], out)?;
        Ok(self.derived(v, Op::WeightedChannelSum { stack, weights }))
    }

    /// Per-channel affine map of capsules: input `(.., Din, N)`, weight
    /// `(N, Din, Dout)`, bias `(N, Dout)`; output `(.., Dout, N)`.
    pub fn capsule_affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_node(input)?;
        self.check_node(weight)?;
        self.check_node(bias)?;
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if xs.rank() < 2 {
            return Err(Error::Config(format!("capsule affine input {xs} has no capsule axes")));
        }
        let r = xs.rank();
        let (din, n) = (xs.dim(r - 2), xs.dim(r - 1));
        if ws.rank() != 3 || ws.dim(0) != n || ws.dim(1) != din {
            return Err(Error::Config(format!(
                "capsule affine: weight {ws} does not fit capsules {xs}"
            )));
        }
        let dout = ws.dim(2);
        if bs.dims() != [n, dout] {
            return Err(Error::Config(format!("capsule affine: bias {bs} does not fit weight {ws}")));
        }
        let rows = xs.numel() / (din * n);
        let mut out = vec![T::zero(); rows * dout * n];
        let x = self.value(input).data();
        let wd = self.value(weight).data();
        for c in 0..n {
            gemm(
                rows,
                din,
                dout,
                x,
                MatLayout {
                    offset: c,
                    row_stride: din * n,
                    col_stride: n,
                },
                wd,
                MatLayout::row_major(dout).at(c * din * dout),
                &mut out,
                MatLayout {
                    offset: c,
                    row_stride: dout * n,
                    col_stride: n,
                },
                false,
            );
        }
        let bd = self.value(bias).data();
        for row in out.chunks_exact_mut(dout * n) {
            for e in 0..dout {
                for c in 0..n {
                    row[e * n + c] += bd[c * dout + e];
                }
            }
        }
        let mut dims: Vec<usize> = xs.dims().to_vec();
        dims[r - 2] = dout;
        let v = Tensor::from_vec(&dims, out)?;
        Ok(self.derived(v, Op::CapsuleAffine { input, weight, bias }))
    }

    /// Fully connected layer: `(B, I) x (I, O) + (O)`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_node(input)?;
        self.check_node(weight)?;
        self.check_node(bias)?;
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if xs.rank() != 2 || ws.rank() != 2 || xs.dim(1) != ws.dim(0) || bs.dims() != [ws.dim(1)] {
            return Err(Error::Config(format!(
                "dense: input {xs}, weight {ws} and bias {bs} do not fit"
            )));
        }
        let (b, i, o) = (xs.dim(0), xs.dim(1), ws.dim(1));
        let mut out = vec![T::zero(); b * o];
        gemm(
            b,
            i,
            o,
            self.value(input).data(),
            MatLayout::row_major(i),
            self.value(weight).data(),
            MatLayout::row_major(o),
            &mut out,
            MatLayout::row_major(o),
            false,
        );
        let bd = self.value(bias).data();
        for row in out.chunks_exact_mut(o) {
            for (x, &bv) in row.iter_mut().zip(bd) {
                *x += bv;
            }
        }
        let v = Tensor::from_vec(&[b, o], out)?;
        Ok(self.derived(v, Op::Dense { input, weight, bias }))
    }

    /// Batch normalization over every axis but the last.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<NodeId> {
        self.check_node(input)?;
        self.check_node(gamma)?;
        self.check_node(beta)?;
        let xs = self.shape(input);
        let c = *xs.dims().last().ok_or_else(|| Error::Config("batchnorm on a scalar".into()))?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id).dims() != [c] {
                return Err(Error::Config(format!(
                    "batchnorm: {name} {} does not match {c} channels",
                    self.shape(id)
                )));
            }
        }
        let x = self.value(input).data();
        let count = x.len() / c;
        let (mean, var, train) = match stats {
            NormStats::Batch => {
                let inv_n = T::one() / T::of(count as f64);
                let mut mean = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m *= inv_n);
                let mut var = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s *= inv_n);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Config(format!("batchnorm: running stats do not match {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ((xr, nr), or) in x
            .chunks_exact(c)
            .zip(normalized.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                nr[j] = (xr[j] - mean[j]) * inv_std[j];
                or[j] = gd[j] * nr[j] + bd[j];
            }
        }
        let v = Tensor::from_parts(xs, out);
        let id = self.derived(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            },
        );
        if train {
            self.nodes[id.0].stats = Some((mean, var));
        }
        Ok(id)
    }

    /// Euclidean norm of each capsule divided by `sqrt(D)`: input
    /// `(R.., D, N)` collapses to `(R, N)` with `R` the product of the
    /// leading extents.
    pub fn capsule_length(&mut self, input: NodeId) -> Result<NodeId> {
        self.check_node(input)?;
        let xs = self.shape(input);
        if xs.rank() < 3 {
            return Err(Error::Config(format!("capsule length expects (B.., D, N), got {xs}")));
        }
        let r = xs.rank();
        let (d, n) = (xs.dim(r - 2), xs.dim(r - 1));
        let rows = xs.numel() / (d * n);
        let scale = T::one() / T::of(d as f64).sqrt();
        let x = self.value(input).data();
        let mut out = vec![T::zero(); rows * n];
        for (row, block) in x.chunks_exact(d * n).enumerate() {
            for c in 0..n {
                let mut s = T::zero();
                for dd in 0..d {
                    let v = block[dd * n + c];
                    s += v * v;
                }
                out[row * n + c] = s.sqrt() * scale;
            }
        }
        let v = Tensor::from_vec(&[rows, n], out)?;
        Ok(self.derived(v, Op::CapsuleLength(input)))
    }

    /// Mean over the batch of the per-class squared hinge loss on scores
    /// `(B, N)`.
    pub fn margin_loss(
        &mut self,
        scores: NodeId,
        labels: &[usize],
        m_plus: T,
        m_minus: T,
        lambda: T,
    ) -> Result<NodeId> {
        self.check_node(scores)?;
        let ss = self.shape(scores);
        if ss.rank() != 2 || ss.dim(0) != labels.len() {
            return Err(Error::Input(format!(
                "margin loss: scores {ss} do not match {} labels",
                labels.len()
            )));
        }
        let n = ss.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Input(format!("label {bad} outside [0, {n})")));
        }
        let s = self.value(scores).data();
        let mut total = T::zero();
        for (row, &label) in s.chunks_exact(n).zip(labels) {
            for (c, &v) in row.iter().enumerate() {
                total += if c == label {
                    let h = (m_plus - v).max(T::zero());
                    h * h
                } else {
                    let h = (v - m_minus).max(T::zero());
                    lambda * h * h
                };
            }
        }
        let v = Tensor::scalar(total / T::of(labels.len() as f64));
        Ok(self.derived(
            v,
            Op::MarginLoss {
                scores,
                labels: labels.to_vec(),
                m_plus,
                m_minus,
                lambda,
            },
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, input: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        self.check_node(input)?;
        let xs = self.shape(input);
        if xs.numel() != target.len() {
            return Err(Error::Input(format!(
                "reconstruction {xs} and target {} differ in size",
                target.shape()
            )));
        }
        let x = self.value(input).data();
        let s: T = x
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let v = Tensor::scalar(s / T::of(x.len() as f64));
        Ok(self.derived(
            v,
            Op::MeanSquaredError {
                input,
                target: target.data().to_vec(),
            },
        ))
    }

    pub(super) fn backward_node(
        &self,
        id: usize,
        g: &Tensor<T>,
        pass: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(a) => {
                let shape = nodes[a.0].value.shape();
                accumulate(nodes, pass, *a, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Add(a, b) => {
                accumulate(nodes, pass, *a, g.clone());
                accumulate(nodes, pass, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate_with(nodes, pass, *a, || zip_map(g, vb, |g, y| g * y));
                accumulate_with(nodes, pass, *b, || zip_map(g, va, |g, x| g * x));
            }
            Op::Scale(a, f) => {
                let f = *f;
                accumulate(nodes, pass, *a, g.map(|x| x * f));
            }
            Op::MulConst { input, factor } => {
                let data = gd.iter().zip(factor).map(|(&g, &f)| g * f).collect();
                accumulate(nodes, pass, *input, Tensor::from_parts(g.shape(), data));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                accumulate(nodes, pass, *a, zip_map(g, y, |g, y| g * (T::one() - y * y)));
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                accumulate(
                    nodes,
                    pass,
                    *a,
                    zip_map(g, x, |g, x| if x > T::zero() { g } else { T::zero() }),
                );
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                accumulate(nodes, pass, *a, zip_map(g, y, |g, y| g * y * (T::one() - y)));
            }
            Op::Sum(a) => {
                let shape = nodes[a.0].value.shape();
                accumulate(nodes, pass, *a, Tensor::from_parts(shape, vec![gd[0]; shape.numel()]));
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let mut dot = T::zero();
                        for i in 0..len {
                            dot += gd[idx(i)] * yd[idx(i)];
                        }
                        for i in 0..len {
                            dx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                accumulate(nodes, pass, *input, Tensor::from_parts(y.shape(), dx));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let cout = node.value.dims()[3];
                let (rows, patch) = (geom.rows(), geom.patch());
                accumulate_with(nodes, pass, *kernel, || {
                    let mut dk = vec![T::zero(); patch * cout];
                    gemm(
                        patch,
                        rows,
                        cout,
                        cols,
                        MatLayout::row_major(patch).t(),
                        gd,
                        MatLayout::row_major(cout),
                        &mut dk,
                        MatLayout::row_major(cout),
                        false,
                    );
                    Tensor::from_parts(nodes[kernel.0].value.shape(), dk)
                });
                if let Some(b) = bias {
                    accumulate_with(nodes, pass, *b, || {
                        let mut db = vec![T::zero(); cout];
                        for row in gd.chunks_exact(cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::from_parts(nodes[b.0].value.shape(), db)
                    });
                }
                accumulate_with(nodes, pass, *input, || {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(
                        rows,
                        cout,
                        patch,
                        gd,
                        MatLayout::row_major(cout),
                        nodes[kernel.0].value.data(),
                        MatLayout::row_major(cout).t(),
                        &mut dcols,
                        MatLayout::row_major(patch),
                        false,
                    );
                    let shape = nodes[input.0].value.shape();
                    let mut dx = vec![T::zero(); shape.numel()];
                    col2im(&dcols, InputView::dense(geom), geom, &mut dx);
                    Tensor::from_parts(shape, dx)
                });
            }
            Op::CapsuleTransform {
                input,
                kernels,
                geom,
                in_channels,
                out_channels,
                out_dim,
                cols,
            } => {
                let (m_ch, n_ch, dout) = (*in_channels, *out_channels, *out_dim);
                let (rows, patch) = (geom.rows(), geom.patch());
                let row_stride = n_ch * dout * m_ch;
                let g_block = |n: usize, m: usize| MatLayout {
                    offset: n * dout * m_ch + m,
                    row_stride,
                    col_stride: m_ch,
                };
                accumulate_with(nodes, pass, *kernels, || {
                    let shape = nodes[kernels.0].value.shape();
                    let mut dk = vec![T::zero(); shape.numel()];
                    for (m, patches) in cols.iter().enumerate().take(m_ch) {
                        for n in 0..n_ch {
                            gemm(
                                patch,
                                rows,
                                dout,
                                patches,
                                MatLayout::row_major(patch).t(),
                                gd,
                                g_block(n, m),
                                &mut dk,
                                MatLayout::row_major(dout).at((n * m_ch + m) * patch * dout),
                                false,
                            );
                        }
                    }
                    Tensor::from_parts(shape, dk)
                });
                accumulate_with(nodes, pass, *input, || {
                    let shape = nodes[input.0].value.shape();
                    let kd = nodes[kernels.0].value.data();
                    let mut dx = vec![T::zero(); shape.numel()];
                    let mut dcols = vec![T::zero(); rows * patch];
                    for m in 0..m_ch {
                        for n in 0..n_ch {
                            gemm(
                                rows,
                                dout,
                                patch,
                                gd,
                                g_block(n, m),
                                kd,
                                MatLayout::row_major(dout).at((n * m_ch + m) * patch * dout).t(),
                                &mut dcols,
                                MatLayout::row_major(patch),
                                n > 0,
                            );
                        }
                        col2im(&dcols, channel_view(geom, m, m_ch), geom, &mut dx);
                    }
                    Tensor::from_parts(shape, dx)
                });
            }
            Op::ChannelwiseDot { input, reference } => {
                let xv = &nodes[input.0].value;
                let rv = &nodes[reference.0].value;
                let xs = xv.shape();
                let (bp, k, d, m) = (xs.dim(0) * xs.dim(1), xs.dim(2), xs.dim(3), xs.dim(4));
                let (x, r) = (xv.data(), rv.data());
                accumulate_with(nodes, pass, *input, || {
                    let mut dx = vec![T::zero(); x.len()];
                    for i in 0..bp {
                        for kk in 0..k {
                            let gb = &gd[(i * k + kk) * m..(i * k + kk + 1) * m];
                            let rb = &r[kk * d * m..(kk + 1) * d * m];
                            let db = &mut dx[(i * k + kk) * d * m..(i * k + kk + 1) * d * m];
                            for dd in 0..d {
                                for mm in 0..m {
                                    db[dd * m + mm] = gb[mm] * rb[dd * m + mm];
                                }
                            }
                        }
                    }
                    Tensor::from_parts(xs, dx)
                });
                accumulate_with(nodes, pass, *reference, || {
                    let mut dr = vec![T::zero(); r.len()];
                    for i in 0..bp {
                        for kk in 0..k {
                            let gb = &gd[(i * k + kk) * m..(i * k + kk + 1) * m];
                            let xb = &x[(i * k + kk) * d * m..(i * k + kk + 1) * d * m];
                            let db = &mut dr[kk * d * m..(kk + 1) * d * m];
                            for dd in 0..d {
                                for mm in 0..m {
                                    db[dd * m + mm] += gb[mm] * xb[dd * m + mm];
                                }
                            }
                        }
                    }
                    Tensor::from_parts(rv.shape(), dr)
                });
            }
            Op::WeightedChannelSum { stack, weights } => {
                let sv = &nodes[stack.0].value;
                let cv = &nodes[weights.0].value;
                let ss = sv.shape();
                let (bp, k, d, m) = (ss.dim(0) * ss.dim(1), ss.dim(2), ss.dim(3), ss.dim(4));
                let (s, c) = (sv.data(), cv.data());
                accumulate_with(nodes, pass, *stack, || {
                    let mut ds = vec![T::zero(); s.len()];
                    for i in 0..bp {
                        for kk in 0..k {
                            let cb = &c[(i * k + kk) * m..(i * k + kk + 1) * m];
                            let db = &mut ds[(i * k + kk) * d * m..(i * k + kk + 1) * d * m];
                            for dd in 0..d {
                                let gv = gd[(i * d + dd) * k + kk];
                                for mm in 0..m {
                                    db[dd * m + mm] = gv * cb[mm];
                                }
                            }
                        }
                    }
                    Tensor::from_parts(ss, ds)
                });
                accumulate_with(nodes, pass, *weights, || {
                    let mut dc = vec![T::zero(); c.len()];
                    for i in 0..bp {
                        for kk in 0..k {
                            let sb = &s[(i * k + kk) * d * m..(i * k + kk + 1) * d * m];
                            let db = &mut dc[(i * k + kk) * m..(i * k + kk + 1) * m];
                            for dd in 0..d {
                                let gv = gd[(i * d + dd) * k + kk];
                                for mm in 0..m {
                                    db[mm] += gv * sb[dd * m + mm];
                                }
                            }
                        }
                    }
                    Tensor::from_parts(cv.shape(), dc)
                });
            }
            Op::CapsuleAffine { input, weight, bias } => {
                let xv = &nodes[input.0].value;
                let wv = &nodes[weight.0].value;
                let ws = wv.shape();
                let (n, din, dout) = (ws.dim(0), ws.dim(1), ws.dim(2));
                let rows = xv.len() / (din * n);
                let x_layout = |c: usize| MatLayout {
                    offset: c,
                    row_stride: din * n,
                    col_stride: n,
                };
                let g_layout = |c: usize| MatLayout {
                    offset: c,
                    row_stride: dout * n,
                    col_stride: n,
                };
                accumulate_with(nodes, pass, *weight, || {
                    let mut dw = vec![T::zero(); wv.len()];
                    for c in 0..n {
                        gemm(
                            din,
                            rows,
                            dout,
                            xv.data(),
                            x_layout(c).t(),
                            gd,
                            g_layout(c),
                            &mut dw,
                            MatLayout::row_major(dout).at(c * din * dout),
                            false,
                        );
                    }
                    Tensor::from_parts(ws, dw)
                });
                accumulate_with(nodes, pass, *bias, || {
                    let mut db = vec![T::zero(); n * dout];
                    for row in gd.chunks_exact(dout * n) {
                        for e in 0..dout {
                            for c in 0..n {
                                db[c * dout + e] += row[e * n + c];
                            }
                        }
                    }
                    Tensor::from_parts(nodes[bias.0].value.shape(), db)
                });
                accumulate_with(nodes, pass, *input, || {
                    let mut dx = vec![T::zero(); xv.len()];
                    for c in 0..n {
                        gemm(
                            rows,
                            dout,
                            din,
                            gd,
                            g_layout(c),
                            wv.data(),
                            MatLayout::row_major(dout).at(c * din * dout).t(),
                            &mut dx,
                            x_layout(c),
                            false,
                        );
                    }
                    Tensor::from_parts(xv.shape(), dx)
                });
            }
            Op::Dense { input, weight, bias } => {
                let xv = &nodes[input.0].value;
                let wv = &nodes[weight.0].value;
                let (b, i, o) = (xv.dims()[0], xv.dims()[1], wv.dims()[1]);
                accumulate_with(nodes, pass, *weight, || {
                    let mut dw = vec![T::zero(); i * o];
                    gemm(
                        i,
                        b,
                        o,
                        xv.data(),
                        MatLayout::row_major(i).t(),
                        gd,
                        MatLayout::row_major(o),
                        &mut dw,
                        MatLayout::row_major(o),
                        false,
                    );
                    Tensor::from_parts(wv.shape(), dw)
                });
                accumulate_with(nodes, pass, *bias, || {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks_exact(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::from_parts(nodes[bias.0].value.shape(), db)
                });
                accumulate_with(nodes, pass, *input, || {
                    let mut dx = vec![T::zero(); b * i];
                    gemm(
                        b,
                        o,
                        i,
                        gd,
                        MatLayout::row_major(o),
                        wv.data(),
                        MatLayout::row_major(o).t(),
                        &mut dx,
                        MatLayout::row_major(i),
                        false,
                    );
                    Tensor::from_parts(xv.shape(), dx)
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let gamma_v = nodes[gamma.0].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, nr) in gd.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * nr[j];
                    }
                }
                accumulate_with(nodes, pass, *gamma, || Tensor::from_parts(nodes[gamma.0].value.shape(), sum_gx.clone()));
                accumulate_with(nodes, pass, *beta, || Tensor::from_parts(nodes[beta.0].value.shape(), sum_g.clone()));
                accumulate_with(nodes, pass, *input, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    if *train {
                        let count = T::of((gd.len() / c) as f64);
                        for ((dr, gr), nr) in dx
                            .chunks_exact_mut(c)
                            .zip(gd.chunks_exact(c))
                            .zip(normalized.chunks_exact(c))
                        {
                            for j in 0..c {
                                // d xhat = g * gamma, folded into the sums
                                dr[j] = gamma_v[j] * inv_std[j] / count
                                    * (count * gr[j] - sum_g[j] - nr[j] * sum_gx[j]);
                            }
                        }
                    } else {
                        for (dr, gr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                            for j in 0..c {
                                dr[j] = gr[j] * gamma_v[j] * inv_std[j];
                            }
                        }
                    }
                    Tensor::from_parts(nodes[input.0].value.shape(), dx)
                });
            }
            Op::CapsuleLength(a) => {
                let xv = &nodes[a.0].value;
                let r = xv.shape().rank();
                let (d, n) = (xv.dims()[r - 2], xv.dims()[r - 1]);
                let y = node.value.data();
                let scale = T::one() / T::of(d as f64).sqrt();
                let mut dx = vec![T::zero(); xv.len()];
                for (row, (xb, db)) in xv
                    .data()
                    .chunks_exact(d * n)
                    .zip(dx.chunks_exact_mut(d * n))
                    .enumerate()
                {
                    for c in 0..n {
                        let norm = y[row * n + c] / scale;
                        if norm > T::zero() {
                            let f = gd[row * n + c] * scale / norm;
                            for dd in 0..d {
                                db[dd * n + c] = f * xb[dd * n + c];
                            }
                        }
                    }
                }
                accumulate(nodes, pass, *a, Tensor::from_parts(xv.shape(), dx));
            }
            Op::MarginLoss {
                scores,
                labels,
                m_plus,
                m_minus,
                lambda,
            } => {
                let sv = &nodes[scores.0].value;
                let n = sv.dims()[1];
                let two = T::of(2.0);
                let f = gd[0] / T::of(labels.len() as f64);
                let mut ds = vec![T::zero(); sv.len()];
                for ((row, drow), &label) in sv.data().chunks_exact(n).zip(ds.chunks_exact_mut(n)).zip(labels) {
                    for c in 0..n {
                        let v = row[c];
                        drow[c] = f * if c == label {
                            -two * (*m_plus - v).max(T::zero())
                        } else {
                            two * *lambda * (v - *m_minus).max(T::zero())
                        };
                    }
                }
                accumulate(nodes, pass, *scores, Tensor::from_parts(sv.shape(), ds));
            }
            Op::MeanSquaredError { input, target } => {
                let xv = &nodes[input.0].value;
                let f = T::of(2.0) * gd[0] / T::of(xv.len() as f64);
                let dx = xv.data().iter().zip(target).map(|(&x, &t)| f * (x - t)).collect();
                accumulate(nodes, pass, *input, Tensor::from_parts(xv.shape(), dx));
            }
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

fn split_axis(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let dims = shape.dims();
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// View of capsule channel `m` of a `(B, W, H, D, M)` tensor as a plain
/// `(B, W, H, D)` feature map.
fn channel_view(g: &ConvGeom, m: usize, m_ch: usize) -> InputView {
    InputView {
        offset: m,
        sb: g.in_w * g.in_h * g.in_c * m_ch,
        sw: g.in_h * g.in_c * m_ch,
        sh: g.in_c * m_ch,
        sc: m_ch,
    }
}
