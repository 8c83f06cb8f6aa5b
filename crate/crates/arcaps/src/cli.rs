//! The `arcaps` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use arcaps_core::align;
use arcaps_core::data::{Dataset, Split};
use arcaps_core::lab::{self, Family};
use arcaps_core::model::ArCapsNet;
use arcaps_core::transform::{self, AugmentPolicy};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, RunConfig};
use crate::datasets;
use crate::error::{Error, Result};
use crate::report;
use crate::selftest;
use crate::trainer::{self, RunFiles, TrainOptions};

/// Name of the resolved configuration written into the output directory.
pub const CONFIG_ECHO: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "arcaps", version, about = "Attention-routing capsule networks: training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write metrics and checkpoints to the output directory.
    Train(CommonArgs),
    /// Score a checkpoint on the test (or validation) split.
    Eval(CommonArgs),
    /// Alignment ratios, opposite-family cosines and the random baseline.
    AnalyzeAlign(CommonArgs),
    /// Reconstructions of perturbed class capsules.
    AnalyzePerturb(CommonArgs),
    /// Trainable parameters per layer.
    CountParams(CommonArgs),
    /// Gradient checks and loop-implementation comparisons.
    Selftest(CommonArgs),
}

/// Flags shared by every subcommand; they override the configuration file.
#[derive(Debug, Clone, Default, Args)]
struct CommonArgs {
    /// Configuration file (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Checkpoint to evaluate or analyze [default: <out-dir>/best.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test images used by analyze-align.
    #[arg(long)]
    samples: Option<usize>,
}

/// Runs one invocation and returns the process exit status. `data_dir` is
/// the value of `ARCAPS_DATA_DIR`.
pub fn run<I, T>(args: I, data_dir: Option<PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{}", e.render());
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 }
                }
                _ => {
                    let text = e.render().to_string();
                    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
                    let _ = writeln!(err, "{line}");
                    1
                }
            };
        }
    };
    let ctx = Context { data_dir, out };
    match dispatch(cli.command, ctx) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {msg}");
            e.exit_code()
        }
    }
}

struct Context<'a> {
    data_dir: Option<PathBuf>,
    out: &'a mut dyn Write,
}

fn dispatch(command: Command, mut ctx: Context<'_>) -> Result<i32> {
    match command {
        Command::Train(a) => train(&a, &mut ctx),
        Command::Eval(a) => eval(&a, &mut ctx),
        Command::AnalyzeAlign(a) => analyze_align(&a, &mut ctx),
        Command::AnalyzePerturb(a) => analyze_perturb(&a, &mut ctx),
        Command::CountParams(a) => count_params(&a, &mut ctx),
        Command::Selftest(_) => run_selftest(&mut ctx),
    }
}

/// The configuration file (or the defaults) with command-line overrides.
fn resolve_config(a: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::parse(&text).map_err(|e| match e {
                Error::Usage(m) => Error::Usage(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.epochs {
        cfg.train.epochs = n;
    }
    if let Some(n) = a.batch_size {
        cfg.train.batch_size = n;
    }
    if let Some(d) = &a.out_dir {
        cfg.train.out_dir = d.clone();
    }
    if let Some(n) = a.workers {
        cfg.train.workers = n;
    }
    if let Some(n) = a.samples {
        cfg.analyze.samples = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.train.out_dir.join(name)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// One file split of the configured dataset, truncated to the configured
/// sample count and padded to the augmentation canvas.
fn load_split(cfg: &RunConfig, data_dir: Option<PathBuf>, split: Split) -> Result<Dataset> {
    let root = cfg.data_root(data_dir);
    let full = match cfg.data.kind {
        DatasetKind::Mnist => datasets::load_mnist(&root, split)?,
        DatasetKind::Cifar10 => datasets::load_cifar10(&datasets::cifar10_files(&root, split), split)?,
    };
    let limit = match split {
        Split::Test => cfg.data.test_samples,
        _ => cfg.data.train_samples,
    };
    let data = if limit > 0 { full.head(limit) } else { full };
    pad_dataset(data, &cfg.data.augment)
}

/// Centres every image on the `pad_to` canvas, if there is one.
pub fn pad_dataset(data: Dataset, policy: &AugmentPolicy) -> Result<Dataset> {
    let Some((rows, cols)) = policy.pad_to else {
        return Ok(data);
    };
    let dims = data.dims();
    if (dims.rows, dims.cols) == (rows, cols) {
        return Ok(data);
    }
    let mut pixels = Vec::with_capacity(data.len() * rows * cols * dims.channels);
    for i in 0..data.len() {
        pixels.extend(transform::pad_to(data.image(i), dims, rows, cols)?);
    }
    let padded = policy.output_dims(dims);
    Ok(Dataset::new(padded, pixels, data.labels().to_vec(), data.classes(), data.split())?)
}

/// Training images split into training and validation parts.
fn train_val(cfg: &RunConfig, data_dir: Option<PathBuf>) -> Result<(Dataset, Dataset)> {
    let data = load_split(cfg, data_dir, Split::Train)?;
    Ok(data.split_train_val(cfg.train.seed)?)
}

/// The checkpoint named on the command line or the run's best checkpoint.
/// With an explicit configuration file its model must match.
fn load_checkpoint(a: &CommonArgs, cfg: &RunConfig) -> Result<Checkpoint> {
    let path = a.checkpoint.clone().unwrap_or_else(|| out_path(cfg, "best.ckpt"));
    let ckpt = Checkpoint::load(&path)?;
    if a.config.is_some() && ckpt.model != cfg.model {
        return Err(Error::format(
            &path,
            "checkpoint architecture differs from the configured model",
        ));
    }
    Ok(ckpt)
}

pub fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed,
        workers: cfg.train.workers,
        augment: AugmentPolicy {
            pad_to: None,
            ..cfg.data.augment
        },
        learning_rate: cfg.train.learning_rate,
        lr_decay: cfg.train.lr_decay,
    }
}

fn train(a: &CommonArgs, ctx: &mut Context<'_>) -> Result<i32> {
    let cfg = resolve_config(a)?;
    write_file(&out_path(&cfg, CONFIG_ECHO), cfg.to_text())?;
    let (train_set, val_set) = train_val(&cfg, ctx.data_dir.clone())?;
    let _ = writeln!(
        ctx.out,
        "training on {} images, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let files = RunFiles::in_dir(&cfg.train.out_dir);
    let out = &mut *ctx.out;
    let run = trainer::train(&cfg.model, &train_set, &val_set, &train_options(&cfg), Some(&files), |r| {
        let _ = writeln!(
            out,
            "epoch {:>3}  loss {:.5}  margin {:.5}  recon {:.5}  val acc {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.margin_loss, r.recon_loss, r.val_accuracy, r.seconds
        );
    })?;
    if let Some(acc) = run.best.state.val_accuracy {
        let _ = writeln!(
            ctx.out,
            "best validation accuracy {acc:.4} after epoch {}",
            run.best.state.epoch
        );
    }
    let _ = writeln!(ctx.out, "wrote {}", cfg.train.out_dir.display());
    Ok(0)
}

fn eval(a: &CommonArgs, ctx: &mut Context<'_>) -> Result<i32> {
    let cfg = resolve_config(a)?;
    let ckpt = load_checkpoint(a, &cfg)?;
    let net = ckpt.network()?;
    let (name, data) = match cfg.data.eval_split {
        Split::Val => ("val", train_val(&cfg, ctx.data_dir.clone())?.1),
        _ => ("test", load_split(&cfg, ctx.data_dir.clone(), Split::Test)?),
    };
    let ev = trainer::evaluate(&net, &ckpt.params, &data, cfg.train.workers)?;
    let _ = writeln!(
        ctx.out,
        "{name}: {} images, accuracy {:.4} ({} correct), loss {:.5}, margin {:.5}, recon {:.5}",
        ev.count, ev.accuracy, ev.correct, ev.loss, ev.margin_loss, ev.recon_loss
    );
    let mut summary = String::from("metric,value\n");
    let _ = writeln!(summary, "images,{}", ev.count);
    let _ = writeln!(summary, "correct,{}", ev.correct);
    let _ = writeln!(summary, "accuracy,{}", ev.accuracy);
    let _ = writeln!(summary, "loss,{}", ev.loss);
    let _ = writeln!(summary, "margin_loss,{}", ev.margin_loss);
    let _ = writeln!(summary, "recon_loss,{}", ev.recon_loss);
    write_file(&out_path(&cfg, &format!("eval_{name}.csv")), summary)?;
    let mut confusion = String::from("true\\predicted");
    for c in 0..ev.confusion.len() {
        let _ = write!(confusion, ",{c}");
    }
    confusion.push('\n');
    for (t, row) in ev.confusion.iter().enumerate() {
        let _ = write!(confusion, "{t}");
        for n in row {
            let _ = write!(confusion, ",{n}");
        }
        confusion.push('\n');
    }
    write_file(&out_path(&cfg, &format!("confusion_{name}.csv")), confusion)?;
    Ok(0)
}

fn analyze_align(a: &CommonArgs, ctx: &mut Context<'_>) -> Result<i32> {
    let cfg = resolve_config(a)?;
    let ckpt = load_checkpoint(a, &cfg)?;
    let net = ckpt.network()?;
    let test = load_split(&cfg, ctx.data_dir.clone(), Split::Test)?;
    let (indices, clamped) = lab::sample_indices(test.len(), cfg.analyze.samples, cfg.train.seed);
    if clamped {
        let _ = writeln!(
            ctx.out,
            "note: {} samples requested, the test split has {}",
            cfg.analyze.samples,
            test.len()
        );
    }
    let (alignment, cosines) =
        report::equivariance(&net, &ckpt.params, &test, &indices, &cfg.analyze.families, cfg.train.workers)?;
    let baseline = align::random_baseline(
        net.config().class_dim,
        Family::ALL[0].transforms().len(),
        cfg.analyze.baseline_trials,
        cfg.train.seed,
    )?;
    let table = report::alignment_table(&alignment);
    let summary = report::alignment_summary(&alignment, &baseline);
    write_file(&out_path(&cfg, "alignment.csv"), &table)?;
    write_file(&out_path(&cfg, "alignment_summary.csv"), &summary)?;
    for (stem, csv) in report::cosine_histograms(&cosines) {
        write_file(&out_path(&cfg, &format!("cosine_{stem}.csv")), csv)?;
    }
    let _ = write!(ctx.out, "{table}");
    let (mean, std) = alignment.overall();
    let _ = writeln!(
        ctx.out,
        "mean ratio {mean:.4} (std {std:.4}) over {} images; random baseline {:.4} (std {:.4}); gap {:.4}",
        alignment.samples,
        baseline.mean,
        baseline.std,
        mean - baseline.mean
    );
    if alignment.degenerate > 0 || alignment.excluded_rows > 0 {
        let _ = writeln!(
            ctx.out,
            "{} degenerate images, {} zero-length difference vectors excluded",
            alignment.degenerate, alignment.excluded_rows
        );
    }
    Ok(0)
}

fn analyze_perturb(a: &CommonArgs, ctx: &mut Context<'_>) -> Result<i32> {
    let cfg = resolve_config(a)?;
    let ckpt = load_checkpoint(a, &cfg)?;
    let net = ckpt.network()?;
    let test = load_split(&cfg, ctx.data_dir.clone(), Split::Test)?;
    let class_dim = net.config().class_dim;
    let dims: Vec<usize> = if cfg.analyze.dims.is_empty() {
        (0..class_dim).collect()
    } else {
        cfg.analyze.dims.clone()
    };
    if let Some(&d) = dims.iter().find(|&&d| d >= class_dim) {
        return Err(Error::Usage(format!("analyze.dims: {d} is not below the capsule size {class_dim}")));
    }
    let ext = if test.dims().channels == 1 { "pgm" } else { "ppm" };
    write_file(
        &out_path(&cfg, "perturb_offsets.csv"),
        report::offsets_csv(&align::perturbation_offsets(class_dim)),
    )?;
    let mut written = 0;
    for class in 0..cfg.analyze.perturb_classes.min(net.config().classes) {
        let Some(i) = (0..test.len()).find(|&i| test.label(i) == class) else {
            let _ = writeln!(ctx.out, "note: no test image of class {class}");
            continue;
        };
        for &d in &dims {
            let sweep = lab::perturb_and_decode(&net, &ckpt.params, test.image(i), test.dims(), Some(class), d)?;
            let strip = report::image_strip(&sweep.reconstructions, test.dims())?;
            write_file(&out_path(&cfg, &format!("perturb_class{class}_dim{d}.{ext}")), strip)?;
            written += 1;
        }
    }
    let _ = writeln!(
        ctx.out,
        "wrote {written} strips of {} reconstructions to {}",
        align::perturbation_offsets(class_dim).len(),
        cfg.train.out_dir.display()
    );
    Ok(0)
}

fn count_params(a: &CommonArgs, ctx: &mut Context<'_>) -> Result<i32> {
    let cfg = resolve_config(a)?;
    let count = ArCapsNet::new(cfg.model.clone())?.count_parameters();
    let width = count.layers.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    for (name, n) in &count.layers {
        let _ = writeln!(ctx.out, "{name:<width$}  {n:>10}");
    }
    let _ = writeln!(ctx.out, "{:<width$}  {:>10}", "total", count.total);
    Ok(0)
}

fn run_selftest(ctx: &mut Context<'_>) -> Result<i32> {
    let checks = selftest::run()?;
    for c in &checks {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(ctx.out, "{verdict}  {}: {:.3e} (limit {:.0e})", c.name, c.value, c.limit);
    }
    Ok(if checks.iter().all(|c| c.passed()) { 0 } else { 3 })
}
