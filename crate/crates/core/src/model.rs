//! The full network: stem, primary caps, conv caps stack, class capsules and
//! the reconstruction decoder, built from a declarative [`ModelConfig`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Mode, NodeId, NormStats, Padding};
use crate::error::{Error, Result};
use crate::layers::{self, ConvCapsOptions, ConvCapsParams, PrimaryCapsParams};
use crate::loss::{self, LossConfig, LossNodes};
use crate::params::{Bound, ParamKind, ParameterStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// One conv caps layer of the stack between primary and class capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCapsLayer {
    pub dim: usize,
    pub channels: usize,
    pub stride: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub stem_width: usize,
    pub stem_layers: usize,
    pub primary_dim: usize,
    pub primary_channels: usize,
    pub conv_caps: Vec<ConvCapsLayer>,
    pub class_dim: usize,
    pub classes: usize,
    pub decoder_hidden: [usize; 2],
    pub loss: LossConfig,
    pub keep_prob: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// 28x28 grayscale digits: 64-wide stem, 8 primary channels of 16
    /// dimensions, one stride-2 conv caps layer with 8 channels of 32
    /// dimensions, and 10 class capsules of 32 dimensions.
    pub fn mnist() -> Self {
        ModelConfig {
            input_width: 28,
            input_height: 28,
            input_channels: 1,
            stem_width: 64,
            stem_layers: 2,
            primary_dim: 16,
            primary_channels: 8,
            conv_caps: vec![ConvCapsLayer {
                dim: 32,
                channels: 8,
                stride: 2,
                residual: false,
            }],
            class_dim: 32,
            classes: 10,
            decoder_hidden: [512, 512],
            loss: LossConfig::default(),
            keep_prob: 0.5,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }

    /// 32x32 colour images with four residual-capable conv caps layers of 32
    /// dimensions.
    pub fn cifar10() -> Self {
        Self::cifar_grid(4, 32)
    }

    /// CIFAR-10 variant with `layers` conv caps layers of `dim` dimensions.
    /// The first layer downsamples; later layers keep the shape and carry a
    /// residual connection.
    pub fn cifar_grid(layers: usize, dim: usize) -> Self {
        let conv_caps = (0..layers)
            .map(|i| ConvCapsLayer {
                dim,
                channels: 8,
                stride: if i == 0 { 2 } else { 1 },
                residual: i > 0,
            })
            .collect();
        ModelConfig {
            input_width: 32,
            input_height: 32,
            input_channels: 3,
            conv_caps,
            class_dim: dim,
            ..Self::mnist()
        }
    }

    /// Reduced MNIST network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            stem_width: 32,
            primary_dim: 8,
            primary_channels: 4,
            conv_caps: vec![ConvCapsLayer {
                dim: 8,
                channels: 4,
                stride: 2,
                residual: false,
            }],
            class_dim: 8,
            ..Self::mnist()
        }
    }

    /// Smallest network exercising every layer type, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_width: 6,
            input_height: 5,
            input_channels: 1,
            stem_width: 2,
            stem_layers: 2,
            primary_dim: 2,
            primary_channels: 2,
            conv_caps: vec![ConvCapsLayer {
                dim: 2,
                channels: 2,
                stride: 1,
                residual: true,
            }],
            class_dim: 3,
            classes: 3,
            decoder_hidden: [4, 5],
            loss: LossConfig::default(),
            keep_prob: 1.0,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }

    pub fn pixels(&self) -> usize {
        self.input_width * self.input_height * self.input_channels
    }

    /// Spatial extent, capsule dimension and channel count after the primary
    /// caps layer and after each conv caps layer.
    pub fn capsule_shapes(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut w = self.input_width.div_ceil(2);
        let mut h = self.input_height.div_ceil(2);
        let mut out = vec![(w, h, self.primary_dim, self.primary_channels)];
        for l in &self.conv_caps {
            w = w.div_ceil(l.stride.max(1));
            h = h.div_ceil(l.stride.max(1));
            out.push((w, h, l.dim, l.channels));
        }
        out
    }

    /// Checks every field; the error names the first offending one.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.input_width", self.input_width),
            ("model.input_height", self.input_height),
            ("model.input_channels", self.input_channels),
            ("model.stem_width", self.stem_width),
            ("model.primary_dim", self.primary_dim),
            ("model.primary_channels", self.primary_channels),
            ("model.class_dim", self.class_dim),
            ("model.classes", self.classes),
            ("model.decoder_hidden[0]", self.decoder_hidden[0]),
            ("model.decoder_hidden[1]", self.decoder_hidden[1]),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{field} must be at least 1")));
            }
        }
        let mut prev = (
            self.input_width.div_ceil(2),
            self.input_height.div_ceil(2),
            self.primary_dim,
            self.primary_channels,
        );
        for (i, l) in self.conv_caps.iter().enumerate() {
            if l.dim == 0 || l.channels == 0 {
                return Err(Error::Config(format!("model.conv_caps[{i}]: dim and channels must be at least 1")));
            }
            if l.stride == 0 {
                return Err(Error::Config(format!("model.conv_caps[{i}].stride must be at least 1")));
            }
            let next = (prev.0.div_ceil(l.stride), prev.1.div_ceil(l.stride), l.dim, l.channels);
            if l.residual && next != prev {
                return Err(Error::Config(format!(
                    "model.conv_caps[{i}].residual: input shape {:?} differs from output shape {:?} (W, H, D, N)",
                    prev, next
                )));
            }
            prev = next;
        }
        let lp = &self.loss;
        if !(lp.m_plus.is_finite() && lp.m_minus.is_finite() && lp.lambda >= 0.0 && lp.recon_scale >= 0.0) {
            return Err(Error::Config("loss: margins must be finite, lambda and recon_scale non-negative".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!("model.keep_prob {} not in (0, 1]", self.keep_prob)));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("model.bn_epsilon must be positive and model.bn_momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-sqrt(6 / (fan_in + fan_out)), +sqrt(..)]`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Name, shape and initializer of one stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, dims: Vec<usize>, kind: ParamKind, init: Init) -> Self {
        ParamSpec { name, dims, kind, init }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Layer prefix used by the per-layer breakdown (`stem.1`, `caps2`, ...).
    pub fn layer(&self) -> &str {
        match self.name.rsplit_once('.') {
            Some((head, _)) => head.split(".act").next().unwrap_or(head),
            None => &self.name,
        }
    }
}

/// Trainable scalar count with a per-layer breakdown in network order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub layers: Vec<(String, usize)>,
}

/// Output of [`ArCapsNet::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(B, D, N)` class capsules.
    pub capsules: NodeId,
    /// `(B, N)` normalized lengths.
    pub scores: NodeId,
    /// `(stem layer index, batchnorm node)` pairs.
    pub batchnorm: Vec<(usize, NodeId)>,
}

/// Output of [`ArCapsNet::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub capsules: NodeId,
    pub scores: NodeId,
    /// `(B, pixels)`.
    pub reconstruction: NodeId,
    /// Class whose capsule was kept for decoding, per sample.
    pub decoded_labels: Vec<usize>,
    pub batchnorm: Vec<(usize, NodeId)>,
}

/// Loss values, gradients and batch statistics of one training batch.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub loss: f64,
    pub margin: f64,
    pub reconstruction: f64,
    pub correct: usize,
    /// Trainable gradients in store order.
    pub grads: Vec<Tensor<T>>,
    /// Batch `(mean, variance)` of every stem batchnorm.
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

/// Scores and capsules of an inference pass.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub scores: Tensor<T>,
    pub capsules: Tensor<T>,
    pub predictions: Vec<usize>,
}

/// An AR CapsNet architecture. Parameters live in a separate
/// [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArCapsNet {
    config: ModelConfig,
}

impl ArCapsNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ArCapsNet { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn caps_name(&self, i: usize) -> String {
        format!("caps{}", i + 1)
    }

    /// Every stored tensor in creation order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use ParamKind::{Buffer, Trainable};
        let c = &self.config;
        let mut specs = Vec::new();
        let mut cin = c.input_channels;
        for i in 1..=c.stem_layers {
            let p = format!("stem.{i}");
            let w = c.stem_width;
            specs.push(ParamSpec::new(
                format!("{p}.kernel"),
                vec![3, 3, cin, w],
                Trainable,
                Init::Glorot {
                    fan_in: 9 * cin,
                    fan_out: 9 * w,
                },
            ));
            specs.push(ParamSpec::new(format!("{p}.bias"), vec![w], Trainable, Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.gamma"), vec![w], Trainable, Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.beta"), vec![w], Trainable, Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.running_mean"), vec![w], Buffer, Init::Zeros));
            specs.push(ParamSpec::new(format!("{p}.running_var"), vec![w], Buffer, Init::Ones));
            cin = w;
        }
        let (d0, n0) = (c.primary_dim, c.primary_channels);
        specs.push(ParamSpec::new(
            "primary.kernel".into(),
            vec![3, 3, cin, d0 * n0],
            Trainable,
            Init::Glorot {
                fan_in: 9 * cin,
                fan_out: 9 * d0 * n0,
            },
        ));
        specs.push(ParamSpec::new("primary.bias".into(), vec![d0 * n0], Trainable, Init::Zeros));
        push_activation(&mut specs, "primary", d0, n0);

        let shapes = c.capsule_shapes();
        for (i, l) in c.conv_caps.iter().enumerate() {
            let (_, _, din, m) = shapes[i];
            push_caps_layer(&mut specs, &self.caps_name(i), (3, 3), din, m, l.dim, l.channels);
        }
        let (w, h, din, m) = *shapes.last().unwrap_or(&shapes[0]);
        push_caps_layer(&mut specs, "class", (w, h), din, m, c.class_dim, c.classes);

        let widths = [c.class_dim * c.classes, c.decoder_hidden[0], c.decoder_hidden[1], c.pixels()];
        for i in 0..3 {
            let p = format!("decoder.fc{}", i + 1);
            specs.push(ParamSpec::new(
                format!("{p}.weight"),
                vec![widths[i], widths[i + 1]],
                Trainable,
                Init::Glorot {
                    fan_in: widths[i],
                    fan_out: widths[i + 1],
                },
            ));
            specs.push(ParamSpec::new(format!("{p}.bias"), vec![widths[i + 1]], Trainable, Init::Zeros));
        }
        specs
    }

    /// Trainable scalars: batchnorm scale and shift count, running statistics
    /// do not.
    pub fn count_parameters(&self) -> ParamCount {
        let mut layers: Vec<(String, usize)> = Vec::new();
        for s in self.param_specs().iter().filter(|s| s.kind == ParamKind::Trainable) {
            let layer = s.layer();
            match layers.last_mut() {
                Some((name, n)) if name == layer => *n += s.numel(),
                _ => layers.push((layer.to_string(), s.numel())),
            }
        }
        ParamCount {
            total: layers.iter().map(|(_, n)| n).sum(),
            layers,
        }
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for s in self.param_specs() {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Glorot { fan_in, fan_out } => {
                    let limit = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
                    (0..n).map(|_| T::of((rng.random::<f64>() * 2.0 - 1.0) * limit)).collect()
                }
            };
            store.insert(&s.name, s.kind, Tensor::from_vec(&s.dims, data)?)?;
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly the tensors this architecture needs.
    pub fn check_params<T: Real>(&self, store: &ParameterStore<T>) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != store.len() {
            return Err(Error::Config(format!(
                "parameter store has {} tensors, architecture needs {}",
                store.len(),
                specs.len()
            )));
        }
        for (s, e) in specs.iter().zip(store.entries()) {
            if s.name != e.name || s.dims != e.value.dims() || s.kind != e.kind {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    e.name,
                    e.value.dims(),
                    s.name,
                    s.dims
                )));
            }
        }
        Ok(())
    }

    fn check_images<T: Real>(&self, images: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        let dims = images.dims();
        if dims.len() != 4 || dims[1..] != [c.input_width, c.input_height, c.input_channels] {
            return Err(Error::Input(format!(
                "images {} do not match input ({}, {}, {})",
                images.shape(),
                c.input_width,
                c.input_height,
                c.input_channels
            )));
        }
        Ok(dims[0])
    }

    /// Stem, primary caps, conv caps stack and class capsules.
    pub fn encode<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        images: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Encoded> {
        let c = &self.config;
        let batch = self.check_images(images)?;
        let mut x = g.input(images.clone());
        let mut batchnorm = Vec::new();
        for i in 1..=c.stem_layers {
            let name = |s: &str| format!("stem.{i}.{s}");
            let conv = g.conv2d(x, p.node(&name("kernel"))?, Some(p.node(&name("bias"))?), 1, Padding::Same)?;
            let stats = match mode {
                Mode::Train => NormStats::Batch,
                Mode::Infer => NormStats::Running {
                    mean: p.value(&name("running_mean"))?.data(),
                    var: p.value(&name("running_var"))?.data(),
                },
            };
            let bn = g.batchnorm(
                conv,
                p.node(&name("gamma"))?,
                p.node(&name("beta"))?,
                stats,
                T::of(c.bn_epsilon),
            )?;
            batchnorm.push((i, bn));
            x = g.relu(bn)?;
        }
        let primary = PrimaryCapsParams {
            kernel: p.node("primary.kernel")?,
            bias: p.node("primary.bias")?,
            act_weight: p.node("primary.act.weight")?,
            act_bias: p.node("primary.act.bias")?,
        };
        let mut u = layers::primary_caps(g, x, &primary, c.primary_dim, c.primary_channels)?;
        for (i, l) in c.conv_caps.iter().enumerate() {
            let params = caps_params(p, &self.caps_name(i))?;
            let opts = ConvCapsOptions {
                out_channels: l.channels,
                stride: l.stride,
                padding: Padding::Same,
                residual: l.residual,
                keep_prob: c.keep_prob,
            };
            u = layers::conv_caps(g, u, &params, &opts, mode, rng)?;
        }
        let params = caps_params(p, "class")?;
        let out = layers::fully_conv_caps(g, u, &params, c.classes, c.keep_prob, mode, rng)?;
        let capsules = g.reshape(out, &[batch, c.class_dim, c.classes])?;
        let scores = loss::normalized_length(g, capsules)?;
        Ok(Encoded {
            capsules,
            scores,
            batchnorm,
        })
    }

    /// Zeroes every capsule but the one of `labels[b]` and flattens to
    /// `(B, D*N)`.
    pub fn mask_capsules<T: Real>(&self, g: &mut Graph<T>, capsules: NodeId, labels: &[usize]) -> Result<NodeId> {
        let mask = self.capsule_mask::<T>(labels)?;
        let cs = g.shape(capsules);
        if cs.dims() != mask.dims() {
            return Err(Error::Input(format!("capsules {cs} do not match mask {}", mask.shape())));
        }
        let masked = g.mul_const(capsules, &mask)?;
        g.reshape(masked, &[labels.len(), self.config.class_dim * self.config.classes])
    }

    /// `(B, D, N)` tensor of ones in the label columns and zeros elsewhere.
    pub fn capsule_mask<T: Real>(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (d, n) = (self.config.class_dim, self.config.classes);
        if labels.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut mask = vec![T::zero(); labels.len() * d * n];
        for (b, &l) in labels.iter().enumerate() {
            if l >= n {
                return Err(Error::Input(format!("label {l} outside [0, {n})")));
            }
            for k in 0..d {
                mask[(b * d + k) * n + l] = T::one();
            }
        }
        Tensor::from_vec(&[labels.len(), d, n], mask)
    }

    /// The three dense layers applied to masked, flattened capsules
    /// `(B, D*N)`.
    pub fn decode_flat<T: Real>(&self, g: &mut Graph<T>, p: &Bound<'_, T>, flat: NodeId) -> Result<NodeId> {
        let mut x = flat;
        for i in 1..=3 {
            let w = p.node(&format!("decoder.fc{i}.weight"))?;
            let b = p.node(&format!("decoder.fc{i}.bias"))?;
            let y = g.dense(x, w, b)?;
            x = if i < 3 { g.relu(y)? } else { g.sigmoid(y)? };
        }
        Ok(x)
    }

    /// Reconstruction from `(B, D, N)` capsules keeping only the capsule of
    /// each sample's label.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        capsules: NodeId,
        labels: &[usize],
    ) -> Result<NodeId> {
        let flat = self.mask_capsules(g, capsules, labels)?;
        self.decode_flat(g, p, flat)
    }

    /// Encodes and reconstructs. The decoder keeps the capsule of `labels`
    /// when given, of the predicted class otherwise.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        images: &Tensor<T>,
        labels: Option<&[usize]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let enc = self.encode(g, p, images, mode, rng)?;
        let decoded_labels = match labels {
            Some(l) => {
                if l.len() != images.dims()[0] {
                    return Err(Error::Input(format!(
                        "{} labels for {} images",
                        l.len(),
                        images.dims()[0]
                    )));
                }
                l.to_vec()
            }
            None => loss::predictions(g.value(enc.scores))?,
        };
        let reconstruction = self.decode(g, p, enc.capsules, &decoded_labels)?;
        Ok(Forward {
            capsules: enc.capsules,
            scores: enc.scores,
            reconstruction,
            decoded_labels,
            batchnorm: enc.batchnorm,
        })
    }

    /// Margin loss plus scaled reconstruction error against `images`.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        fwd: &Forward,
        images: &Tensor<T>,
        labels: &[usize],
    ) -> Result<LossNodes> {
        loss::total_loss(g, fwd.scores, fwd.reconstruction, images, labels, &self.config.loss)
    }

    /// Forward and backward pass of one training batch.
    pub fn compute_gradients<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<T>,
        images: &Tensor<T>,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<StepResult<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fwd = self.forward(&mut g, &p, images, Some(labels), Mode::Train, rng)?;
        let l = self.loss(&mut g, &fwd, images, labels)?;
        g.backward(l.total)?;
        let preds = loss::predictions(g.value(fwd.scores))?;
        let correct = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
        let batch_stats = fwd
            .batchnorm
            .iter()
            .filter_map(|&(_, id)| g.batch_stats(id).map(|(m, v)| (m.to_vec(), v.to_vec())))
            .collect();
        Ok(StepResult {
            loss: g.value(l.total).item().to_f64(),
            margin: g.value(l.margin).item().to_f64(),
            reconstruction: g.value(l.reconstruction).item().to_f64(),
            correct,
            grads: p.gradients(&g),
            batch_stats,
        })
    }

    /// Blends batch statistics into the running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        batch_stats: &[(Vec<T>, Vec<T>)],
    ) -> Result<()> {
        if batch_stats.len() != self.config.stem_layers {
            return Err(Error::Config(format!(
                "{} batch statistics for {} batchnorm layers",
                batch_stats.len(),
                self.config.stem_layers
            )));
        }
        let mom = T::of(self.config.bn_momentum);
        let rest = T::one() - mom;
        for (i, (mean, var)) in batch_stats.iter().enumerate() {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let t = store.get_mut(&format!("stem.{}.{suffix}", i + 1))?;
                if t.len() != batch.len() {
                    return Err(Error::Config(format!("batch statistics of stem.{} have wrong size", i + 1)));
                }
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = mom * *r + rest * b;
                }
            }
        }
        Ok(())
    }

    /// Deterministic scores and capsules with running batchnorm statistics.
    pub fn infer<T: Real>(&self, store: &ParameterStore<T>, images: &Tensor<T>) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut rng = crate::rng_from_seed(0);
        let enc = self.encode(&mut g, &p, images, Mode::Infer, &mut rng)?;
        let scores = g.value(enc.scores).clone();
        let predictions = loss::predictions(&scores)?;
        Ok(Inference {
            capsules: g.value(enc.capsules).clone(),
            scores,
            predictions,
        })
    }
}

fn push_activation(specs: &mut Vec<ParamSpec>, prefix: &str, dim: usize, channels: usize) {
    specs.push(ParamSpec::new(
        format!("{prefix}.act.weight"),
        vec![channels, dim, dim],
        ParamKind::Trainable,
        Init::Glorot {
            fan_in: dim,
            fan_out: dim,
        },
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.act.bias"),
        vec![channels, dim],
        ParamKind::Trainable,
        Init::Zeros,
    ));
}

fn push_caps_layer(
    specs: &mut Vec<ParamSpec>,
    prefix: &str,
    kernel: (usize, usize),
    din: usize,
    in_channels: usize,
    dout: usize,
    out_channels: usize,
) {
    let area = kernel.0 * kernel.1;
    specs.push(ParamSpec::new(
        format!("{prefix}.transform"),
        vec![out_channels * in_channels, kernel.0, kernel.1, din, dout],
        ParamKind::Trainable,
        Init::Glorot {
            fan_in: area * din,
            fan_out: area * dout,
        },
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.attention"),
        vec![out_channels, dout, in_channels],
        ParamKind::Trainable,
        Init::Glorot {
            fan_in: dout,
            fan_out: 1,
        },
    ));
    push_activation(specs, prefix, dout, out_channels);
}

fn caps_params<T: Real>(p: &Bound<'_, T>, prefix: &str) -> Result<ConvCapsParams> {
    Ok(ConvCapsParams {
        transform: p.node(&format!("{prefix}.transform"))?,
        attention: p.node(&format!("{prefix}.attention"))?,
        act_weight: p.node(&format!("{prefix}.act.weight"))?,
        act_bias: p.node(&format!("{prefix}.act.bias"))?,
    })
}
