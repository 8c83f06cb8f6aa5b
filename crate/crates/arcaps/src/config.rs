//! Line-oriented run configuration: `section.key = value`, `#` comments.
//!
//! Every key has a default, so an empty file describes the MNIST network
//! with batch size 100. The conv caps stack is described by a layer count
//! plus shared dimension, channel count and first-layer stride; later layers
//! use stride 1 and get a residual connection whenever their input and
//! output shapes agree. Individual layers can be overridden with
//! `model.caps<i>.{dim,channels,stride,residual}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use arcaps_core::data::Split;
use arcaps_core::lab::Family;
use arcaps_core::loss::LossConfig;
use arcaps_core::model::{ConvCapsLayer, ModelConfig};
use arcaps_core::transform::AugmentPolicy;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Default network for this dataset.
    pub fn model(self) -> ModelConfig {
        match self {
            DatasetKind::Mnist => ModelConfig::mnist(),
            DatasetKind::Cifar10 => ModelConfig::cifar10(),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err("expects mnist or cifar10".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Directory holding the dataset files. Unset means
    /// `$ARCAPS_DATA_DIR/<kind>`, or `data/<kind>` without the variable.
    pub root: Option<PathBuf>,
    /// Use only the first this many training-file images (0 = all).
    pub train_samples: usize,
    /// Use only the first this many test images (0 = all).
    pub test_samples: usize,
    pub augment: AugmentPolicy,
    /// Split scored by `eval`.
    pub eval_split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeConfig {
    /// Test images per alignment experiment.
    pub samples: usize,
    pub families: Vec<Family>,
    /// Class-capsule coordinates to perturb; empty means all.
    pub dims: Vec<usize>,
    /// Perturbation sweeps use the first test image of each of the first
    /// this many classes.
    pub perturb_classes: usize,
    pub baseline_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::mnist(),
            data: DataConfig {
                kind: DatasetKind::Mnist,
                root: None,
                train_samples: 0,
                test_samples: 0,
                augment: AugmentPolicy::none(),
                eval_split: Split::Test,
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 100,
                seed: 0,
                out_dir: PathBuf::from("runs/default"),
                workers: 1,
                learning_rate: 1e-3,
                lr_decay: 1e-4,
            },
            analyze: AnalyzeConfig {
                samples: 10_000,
                families: Family::ALL.to_vec(),
                dims: Vec::new(),
                perturb_classes: 10,
                baseline_trials: 1000,
            },
        }
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn entries(text: &str) -> Result<Vec<Entry<'_>>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("line {}: expected `section.key = value`", i + 1)))?;
        out.push(Entry {
            line: i + 1,
            key: key.trim(),
            value: value.trim(),
        });
    }
    Ok(out)
}

fn bad(e: &Entry<'_>, what: &str) -> Error {
    Error::Usage(format!("line {}: {} {what}, got `{}`", e.line, e.key, e.value))
}

fn num<T: FromStr>(e: &Entry<'_>) -> Result<T> {
    e.value.parse().map_err(|_| bad(e, "expects a number"))
}

fn flag(e: &Entry<'_>) -> Result<bool> {
    match e.value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(e, "expects true or false")),
    }
}

fn list<T: FromStr>(e: &Entry<'_>) -> Result<Vec<T>> {
    e.value
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(e, "expects a comma-separated list")))
        .collect()
}

fn extents<const K: usize>(e: &Entry<'_>) -> Result<[usize; K]> {
    let parts: Vec<usize> = e
        .value
        .split('x')
        .map(|s| s.trim().parse().map_err(|_| bad(e, "expects extents like 28x28")))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| bad(e, &format!("expects {K} extents separated by x")))
}

/// Model fields in their text form, before the conv caps stack is expanded.
#[derive(Debug, Clone, PartialEq)]
struct ModelKeys {
    base: ModelConfig,
    conv_caps: usize,
    caps_dim: usize,
    caps_channels: usize,
    first_stride: usize,
    residual: bool,
    overrides: BTreeMap<usize, LayerOverride>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LayerOverride {
    dim: Option<usize>,
    channels: Option<usize>,
    stride: Option<usize>,
    residual: Option<bool>,
}

impl ModelKeys {
    fn from_base(base: ModelConfig) -> Self {
        let first = base.conv_caps.first().copied();
        ModelKeys {
            conv_caps: base.conv_caps.len(),
            caps_dim: first.map_or(base.class_dim, |l| l.dim),
            caps_channels: first.map_or(8, |l| l.channels),
            first_stride: first.map_or(2, |l| l.stride),
            residual: true,
            overrides: BTreeMap::new(),
            base,
        }
    }

    fn layers(&self) -> Vec<ConvCapsLayer> {
        let b = &self.base;
        let (mut prev_dim, mut prev_channels) = (b.primary_dim, b.primary_channels);
        let mut out = Vec::with_capacity(self.conv_caps);
        for i in 0..self.conv_caps {
            let o = self.overrides.get(&i).copied().unwrap_or_default();
            let dim = o.dim.unwrap_or(self.caps_dim);
            let channels = o.channels.unwrap_or(self.caps_channels);
            let stride = o.stride.unwrap_or(if i == 0 { self.first_stride } else { 1 });
            let fits = stride == 1 && dim == prev_dim && channels == prev_channels;
            let residual = o.residual.unwrap_or(self.residual && fits);
            out.push(ConvCapsLayer {
                dim,
                channels,
                stride,
                residual,
            });
            (prev_dim, prev_channels) = (dim, channels);
        }
        out
    }

    fn build(&self) -> ModelConfig {
        ModelConfig {
            conv_caps: self.layers(),
            ..self.base.clone()
        }
    }

    /// Text keys that rebuild `model` exactly.
    fn describe(model: &ModelConfig) -> Self {
        let mut keys = ModelKeys::from_base(model.clone());
        if keys.layers() != model.conv_caps {
            keys.residual = false;
        }
        let derived = keys.layers();
        for (i, (want, got)) in model.conv_caps.iter().zip(&derived).enumerate() {
            if want != got {
                keys.overrides.insert(
                    i,
                    LayerOverride {
                        dim: Some(want.dim),
                        channels: Some(want.channels),
                        stride: Some(want.stride),
                        residual: Some(want.residual),
                    },
                );
            }
        }
        keys
    }

    fn apply(&mut self, e: &Entry<'_>, field: &str) -> Result<bool> {
        let m = &mut self.base;
        match field {
            "input" => {
                let [w, h, c] = extents::<3>(e)?;
                (m.input_width, m.input_height, m.input_channels) = (w, h, c);
            }
            "stem_width" => m.stem_width = num(e)?,
            "stem_layers" => m.stem_layers = num(e)?,
            "primary_dim" => m.primary_dim = num(e)?,
            "primary_channels" => m.primary_channels = num(e)?,
            "conv_caps" => self.conv_caps = num(e)?,
            "caps_dim" => {
                self.caps_dim = num(e)?;
                m.class_dim = self.caps_dim;
            }
            "caps_channels" => self.caps_channels = num(e)?,
            "first_stride" => self.first_stride = num(e)?,
            "residual" => self.residual = flag(e)?,
            "class_dim" => m.class_dim = num(e)?,
            "classes" => m.classes = num(e)?,
            "decoder_hidden" => {
                let v: Vec<usize> = list(e)?;
                m.decoder_hidden = v.try_into().map_err(|_| bad(e, "expects two widths"))?;
            }
            "keep_prob" => m.keep_prob = num(e)?,
            "bn_epsilon" => m.bn_epsilon = num(e)?,
            "bn_momentum" => m.bn_momentum = num(e)?,
            _ => return self.apply_layer(e, field),
        }
        Ok(true)
    }

    fn apply_layer(&mut self, e: &Entry<'_>, field: &str) -> Result<bool> {
        let Some((layer, attr)) = field.strip_prefix("caps").and_then(|r| r.split_once('.')) else {
            return Ok(false);
        };
        let Ok(i) = layer.parse::<usize>() else {
            return Ok(false);
        };
        if i == 0 {
            return Ok(false);
        }
        let o = self.overrides.entry(i - 1).or_default();
        match attr {
            "dim" => o.dim = Some(num(e)?),
            "channels" => o.channels = Some(num(e)?),
            "stride" => o.stride = Some(num(e)?),
            "residual" => o.residual = Some(flag(e)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn write(&self, out: &mut String) {
        let m = &self.base;
        let _ = writeln!(out, "model.input = {}x{}x{}", m.input_width, m.input_height, m.input_channels);
        let _ = writeln!(out, "model.stem_width = {}", m.stem_width);
        let _ = writeln!(out, "model.stem_layers = {}", m.stem_layers);
        let _ = writeln!(out, "model.primary_dim = {}", m.primary_dim);
        let _ = writeln!(out, "model.primary_channels = {}", m.primary_channels);
        let _ = writeln!(out, "model.conv_caps = {}", self.conv_caps);
        let _ = writeln!(out, "model.caps_dim = {}", self.caps_dim);
        let _ = writeln!(out, "model.caps_channels = {}", self.caps_channels);
        let _ = writeln!(out, "model.first_stride = {}", self.first_stride);
        let _ = writeln!(out, "model.residual = {}", self.residual);
        for (i, o) in &self.overrides {
            let l = i + 1;
            if let Some(v) = o.dim {
                let _ = writeln!(out, "model.caps{l}.dim = {v}");
            }
            if let Some(v) = o.channels {
                let _ = writeln!(out, "model.caps{l}.channels = {v}");
            }
            if let Some(v) = o.stride {
                let _ = writeln!(out, "model.caps{l}.stride = {v}");
            }
            if let Some(v) = o.residual {
                let _ = writeln!(out, "model.caps{l}.residual = {v}");
            }
        }
        let _ = writeln!(out, "model.class_dim = {}", m.class_dim);
        let _ = writeln!(out, "model.classes = {}", m.classes);
        let _ = writeln!(out, "model.decoder_hidden = {},{}", m.decoder_hidden[0], m.decoder_hidden[1]);
        let _ = writeln!(out, "model.keep_prob = {}", m.keep_prob);
        let _ = writeln!(out, "model.bn_epsilon = {}", m.bn_epsilon);
        let _ = writeln!(out, "model.bn_momentum = {}", m.bn_momentum);
        let l = &m.loss;
        let _ = writeln!(out, "loss.m_plus = {}", l.m_plus);
        let _ = writeln!(out, "loss.m_minus = {}", l.m_minus);
        let _ = writeln!(out, "loss.lambda = {}", l.lambda);
        let _ = writeln!(out, "loss.recon_scale = {}", l.recon_scale);
    }
}

fn apply_loss(loss: &mut LossConfig, e: &Entry<'_>, field: &str) -> Result<bool> {
    match field {
        "m_plus" => loss.m_plus = num(e)?,
        "m_minus" => loss.m_minus = num(e)?,
        "lambda" => loss.lambda = num(e)?,
        "recon_scale" => loss.recon_scale = num(e)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn family_list(families: &[Family]) -> String {
    families.iter().map(|f| f.label()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a configuration file's contents. Errors name the line.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let entries = entries(text)?;
        let mut cfg = RunConfig::default();
        for e in entries.iter().filter(|e| e.key == "data.kind") {
            cfg.data.kind = e.value.parse().map_err(|m: String| bad(e, &m))?;
        }
        let mut model = ModelKeys::from_base(cfg.data.kind.model());
        for e in &entries {
            let Some((section, field)) = e.key.split_once('.') else {
                return Err(Error::Usage(format!("line {}: unknown key `{}`", e.line, e.key)));
            };
            let known = match section {
                "model" => model.apply(e, field)?,
                "loss" => apply_loss(&mut model.base.loss, e, field)?,
                "data" => cfg.apply_data(e, field)?,
                "train" => cfg.apply_train(e, field)?,
                "analyze" => cfg.apply_analyze(e, field)?,
                _ => false,
            };
            if !known {
                return Err(Error::Usage(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        cfg.model = model.build();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_data(&mut self, e: &Entry<'_>, field: &str) -> Result<bool> {
        let d = &mut self.data;
        match field {
            "kind" => {}
            "root" => d.root = Some(PathBuf::from(e.value)),
            "train_samples" => d.train_samples = num(e)?,
            "test_samples" => d.test_samples = num(e)?,
            "translate" => d.augment.translate_fraction = num(e)?,
            "rotate" => d.augment.rotate_max_degrees = num(e)?,
            "flip" => d.augment.horizontal_flip = flag(e)?,
            "pad_to" => {
                d.augment.pad_to = match e.value {
                    "none" => None,
                    _ => {
                        let [r, c] = extents::<2>(e)?;
                        Some((r, c))
                    }
                }
            }
            "eval_split" => {
                d.eval_split = match e.value {
                    "test" => Split::Test,
                    "val" => Split::Val,
                    _ => return Err(bad(e, "expects test or val")),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn apply_train(&mut self, e: &Entry<'_>, field: &str) -> Result<bool> {
        let t = &mut self.train;
        match field {
            "epochs" => t.epochs = num(e)?,
            "batch_size" => t.batch_size = num(e)?,
            "seed" => t.seed = num(e)?,
            "out_dir" => t.out_dir = PathBuf::from(e.value),
            "workers" => t.workers = num(e)?,
            "learning_rate" => t.learning_rate = num(e)?,
            "lr_decay" => t.lr_decay = num(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn apply_analyze(&mut self, e: &Entry<'_>, field: &str) -> Result<bool> {
        let a = &mut self.analyze;
        match field {
            "samples" => a.samples = num(e)?,
            "families" => {
                a.families = e
                    .value
                    .split(',')
                    .map(|s| Family::parse(s.trim()).map_err(|_| bad(e, "expects families like Rot+,x-")))
                    .collect::<Result<_>>()?
            }
            "dims" => a.dims = if e.value == "all" { Vec::new() } else { list(e)? },
            "perturb_classes" => a.perturb_classes = num(e)?,
            "baseline_trials" => a.baseline_trials = num(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.augment.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Usage("train.batch_size must be at least 1".into()));
        }
        if self.train.workers == 0 {
            return Err(Error::Usage("train.workers must be at least 1".into()));
        }
        if !(self.train.learning_rate > 0.0 && self.train.lr_decay >= 0.0) {
            return Err(Error::Usage("train.learning_rate must be positive and train.lr_decay non-negative".into()));
        }
        if self.analyze.families.is_empty() {
            return Err(Error::Usage("analyze.families must name at least one family".into()));
        }
        if let Some(&d) = self.analyze.dims.iter().find(|&&d| d >= self.model.class_dim) {
            return Err(Error::Usage(format!(
                "analyze.dims entry {d} outside the {} class capsule dimensions",
                self.model.class_dim
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value; [`RunConfig::parse`] reads it back
    /// to an equal configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let d = &self.data;
        let _ = writeln!(out, "data.kind = {}", d.kind.name());
        if let Some(root) = &d.root {
            let _ = writeln!(out, "data.root = {}", root.display());
        }
        let _ = writeln!(out, "data.train_samples = {}", d.train_samples);
        let _ = writeln!(out, "data.test_samples = {}", d.test_samples);
        let _ = writeln!(out, "data.translate = {}", d.augment.translate_fraction);
        let _ = writeln!(out, "data.rotate = {}", d.augment.rotate_max_degrees);
        let _ = writeln!(out, "data.flip = {}", d.augment.horizontal_flip);
        match d.augment.pad_to {
            Some((r, c)) => {
                let _ = writeln!(out, "data.pad_to = {r}x{c}");
            }
            None => {
                let _ = writeln!(out, "data.pad_to = none");
            }
        }
        let _ = writeln!(out, "data.eval_split = {}", split_name(d.eval_split));
        out.push('\n');
        ModelKeys::describe(&self.model).write(&mut out);
        out.push('\n');
        let t = &self.train;
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.seed = {}", t.seed);
        let _ = writeln!(out, "train.out_dir = {}", t.out_dir.display());
        let _ = writeln!(out, "train.workers = {}", t.workers);
        let _ = writeln!(out, "train.learning_rate = {}", t.learning_rate);
        let _ = writeln!(out, "train.lr_decay = {}", t.lr_decay);
        out.push('\n');
        let a = &self.analyze;
        let _ = writeln!(out, "analyze.samples = {}", a.samples);
        let _ = writeln!(out, "analyze.families = {}", family_list(&a.families));
        let dims = if a.dims.is_empty() {
            "all".to_string()
        } else {
            a.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(out, "analyze.dims = {dims}");
        let _ = writeln!(out, "analyze.perturb_classes = {}", a.perturb_classes);
        let _ = writeln!(out, "analyze.baseline_trials = {}", a.baseline_trials);
        out
    }

    /// Dataset directory: `data.root`, else `$ARCAPS_DATA_DIR/<kind>`, else
    /// `data/<kind>`.
    pub fn data_root(&self, env_root: Option<PathBuf>) -> PathBuf {
        match &self.data.root {
            Some(r) => r.clone(),
            None => env_root.unwrap_or_else(|| PathBuf::from("data")).join(self.data.kind.name()),
        }
    }
}

/// The `model.*` and `loss.*` lines that rebuild `model` exactly.
pub fn model_to_text(model: &ModelConfig) -> String {
    let mut out = String::new();
    ModelKeys::describe(model).write(&mut out);
    out
}

/// Reads the output of [`model_to_text`]; unknown keys are errors.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut model = ModelKeys::from_base(ModelConfig::mnist());
    for e in entries(text)? {
        let known = match e.key.split_once('.') {
            Some(("model", field)) => model.apply(&e, field)?,
            Some(("loss", field)) => apply_loss(&mut model.base.loss, &e, field)?,
            _ => false,
        };
        if !known {
            return Err(Error::Usage(format!("line {}: unknown model key `{}`", e.line, e.key)));
        }
    }
    let m = model.build();
    m.validate()?;
    Ok(m)
}
