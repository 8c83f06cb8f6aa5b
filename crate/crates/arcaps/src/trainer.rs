//! Training loop, evaluation and model selection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use arcaps_core::autodiff::{Graph, Mode};
use arcaps_core::data::Dataset;
use arcaps_core::model::{ArCapsNet, ModelConfig, StepResult};
use arcaps_core::optim::RmspropState;
use arcaps_core::params::ParameterStore;
use arcaps_core::tensor::Tensor;
use arcaps_core::transform::AugmentPolicy;
use arcaps_core::{derive_seed, loss, rng_from_seed};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,margin_loss,recon_loss,val_accuracy,seconds";

/// Images per forward pass when scoring a dataset.
pub const EVAL_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Batch shards processed in parallel; 1 is fully sequential.
    pub workers: usize,
    pub augment: AugmentPolicy,
    pub learning_rate: f64,
    pub lr_decay: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 100,
            seed: 0,
            workers: 1,
            augment: AugmentPolicy::none(),
            learning_rate: 1e-3,
            lr_decay: 1e-4,
        }
    }
}

/// One row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub margin_loss: f64,
    pub recon_loss: f64,
    pub val_accuracy: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.margin_loss, self.recon_loss, self.val_accuracy, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ArCapsNet,
    /// Parameters after the last epoch.
    pub params: ParameterStore<f32>,
    pub optimizer: RmspropState<f32>,
    /// Parameters of the epoch with the highest validation accuracy; the
    /// earliest wins ties.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

impl TrainRun {
    pub fn best_val_error(&self) -> Option<f64> {
        self.best.state.val_accuracy.map(|a| 1.0 - a)
    }

    pub fn last(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            state: TrainState {
                step: self.optimizer.step,
                epoch: self.history.len() as u64,
                val_accuracy: self.history.last().map(|r| r.val_accuracy),
            },
            params: self.params.clone(),
        }
    }
}

/// Files written by [`train`] under an output directory.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            metrics: dir.join("metrics.csv"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }
}

/// Splits `0..len` into at most `parts` contiguous, nearly equal ranges.
fn shards(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.clamp(1, len.max(1));
    let (base, extra) = (len / parts, len % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let end = start + base + usize::from(i < extra);
            let r = start..end;
            start = end;
            r
        })
        .collect()
}

fn rows(images: &Tensor<f32>, range: std::ops::Range<usize>) -> Result<Tensor<f32>> {
    let per: usize = images.dims()[1..].iter().product();
    let mut dims = images.dims().to_vec();
    dims[0] = range.len();
    Ok(Tensor::from_vec(&dims, images.data()[range.start * per..range.end * per].to_vec())?)
}

/// Gradients of one batch, computed on `workers` contiguous shards whose
/// results are blended in shard order, weighted by shard size. Batchnorm
/// statistics are per shard. Dropout masks are drawn from
/// `derive_seed(seed, [step, shard])`.
pub fn batch_gradients(
    model: &ArCapsNet,
    params: &ParameterStore<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    workers: usize,
    seed: u64,
    step: u64,
) -> Result<StepResult<f32>> {
    let batch = labels.len();
    let parts = shards(batch, workers);
    let run = |k: usize, r: std::ops::Range<usize>| -> Result<StepResult<f32>> {
        let x = rows(images, r.clone())?;
        let mut rng = rng_from_seed(derive_seed(seed, &[step, k as u64]));
        Ok(model.compute_gradients(params, &x, &labels[r], &mut rng)?)
    };
    let results: Vec<Result<StepResult<f32>>> = if parts.len() == 1 {
        vec![run(0, parts[0].clone())]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .cloned()
                .enumerate()
                .map(|(k, r)| s.spawn(move || run(k, r)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("gradient worker panicked".into()))))
                .collect()
        })
    };
    let mut total: Option<StepResult<f32>> = None;
    for (r, part) in results.into_iter().zip(&parts) {
        let part_result = r?;
        let w = part.len() as f64 / batch as f64;
        match total.as_mut() {
            None => {
                let mut first = part_result;
                if parts.len() > 1 {
                    scale_result(&mut first, w);
                }
                total = Some(first);
            }
            Some(t) => {
                t.loss += w * part_result.loss;
                t.margin += w * part_result.margin;
                t.reconstruction += w * part_result.reconstruction;
                t.correct += part_result.correct;
                let wf = w as f32;
                for (a, b) in t.grads.iter_mut().zip(&part_result.grads) {
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += wf * y);
                }
                for ((tm, tv), (m, v)) in t.batch_stats.iter_mut().zip(&part_result.batch_stats) {
                    tm.iter_mut().zip(m).for_each(|(x, y)| *x += wf * y);
                    tv.iter_mut().zip(v).for_each(|(x, y)| *x += wf * y);
                }
            }
        }
    }
    total.ok_or_else(|| Error::Usage("empty batch".into()))
}

fn scale_result(r: &mut StepResult<f32>, w: f64) {
    r.loss *= w;
    r.margin *= w;
    r.reconstruction *= w;
    let wf = w as f32;
    for g in &mut r.grads {
        g.data_mut().iter_mut().for_each(|x| *x *= wf);
    }
    for (m, v) in &mut r.batch_stats {
        m.iter_mut().for_each(|x| *x *= wf);
        v.iter_mut().for_each(|x| *x *= wf);
    }
}

fn check_finite(step: &StepResult<f32>, params: &ParameterStore<f32>, epoch: usize, batch: usize) -> Result<()> {
    let bad_grad = params
        .trainable()
        .zip(&step.grads)
        .find(|(_, g)| !g.all_finite())
        .map(|(e, _)| e.name.clone());
    if step.loss.is_finite() && bad_grad.is_none() {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "loss {} at epoch {} batch {batch}; first non-finite gradient: {}",
        step.loss,
        epoch + 1,
        bad_grad.as_deref().unwrap_or("none")
    )))
}

/// Trains a fresh network on `train_set`, scoring `val_set` after every
/// epoch. With `out`, the metrics file, the best checkpoint and the last
/// checkpoint are rewritten as training progresses; `epochs == 0` still
/// writes the initial parameters. `progress` sees every finished epoch.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    opts: &TrainOptions,
    out: Option<&RunFiles>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    let model = ArCapsNet::new(config.clone())?;
    if opts.batch_size == 0 || opts.workers == 0 {
        return Err(Error::Usage("batch size and worker count must be at least 1".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Usage("validation split is empty; use more training images".into()));
    }
    let mut params: ParameterStore<f32> = model.init_params(&mut rng_from_seed(derive_seed(opts.seed, &[0x1217])))?;
    let mut optimizer = RmspropState::with_hyper(&params, 0.9, opts.learning_rate, opts.lr_decay, 1e-7);
    let mut best = Checkpoint {
        model: config.clone(),
        state: TrainState::default(),
        params: params.clone(),
    };
    let mut metrics = match out {
        Some(files) => {
            if let Some(dir) = files.metrics.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = File::create(&files.metrics).map_err(|e| Error::io(&files.metrics, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{METRICS_HEADER}").and_then(|_| w.flush()).map_err(|e| Error::io(&files.metrics, e))?;
            if opts.epochs == 0 {
                best.save(&files.best)?;
                best.save(&files.last)?;
            }
            Some(w)
        }
        None => None,
    };
    let start = Instant::now();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let (mut loss_sum, mut margin_sum, mut recon_sum) = (0.0, 0.0, 0.0);
        let batches = train_set.batches(opts.batch_size, opts.seed, epoch as u64, &opts.augment)?;
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let step = batch_gradients(
                &model,
                &params,
                &batch.images,
                &batch.labels,
                opts.workers,
                opts.seed,
                optimizer.step,
            )?;
            check_finite(&step, &params, epoch, b)?;
            optimizer.step(&mut params, &step.grads)?;
            model.update_running_stats(&mut params, &step.batch_stats)?;
            let n = batch.labels.len() as f64;
            loss_sum += step.loss * n;
            margin_sum += step.margin * n;
            recon_sum += step.reconstruction * n;
        }
        let eval = evaluate(&model, &params, val_set, opts.workers)?;
        let n = train_set.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            margin_loss: margin_sum / n,
            recon_loss: recon_sum / n,
            val_accuracy: eval.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = best.state.val_accuracy.is_none_or(|a| eval.accuracy > a);
        if improved {
            best = Checkpoint {
                model: config.clone(),
                state: TrainState {
                    step: optimizer.step,
                    epoch: (epoch + 1) as u64,
                    val_accuracy: Some(eval.accuracy),
                },
                params: params.clone(),
            };
        }
        history.push(record);
        if let (Some(files), Some(w)) = (out, metrics.as_mut()) {
            writeln!(w, "{}", record.csv_row())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&files.metrics, e))?;
            if improved {
                best.save(&files.best)?;
            }
        }
        let run = TrainRun {
            model: model.clone(),
            params: params.clone(),
            optimizer: optimizer.clone(),
            best: best.clone(),
            history: history.clone(),
        };
        if let Some(files) = out {
            run.last().save(&files.last)?;
        }
        progress(&record);
    }
    Ok(TrainRun {
        model,
        params,
        optimizer,
        best,
        history,
    })
}

/// Scores of one dataset in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean losses with the decoder fed the true-label capsule.
    pub loss: f64,
    pub margin_loss: f64,
    pub recon_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

struct BatchScore {
    predictions: Vec<usize>,
    loss: f64,
    margin: f64,
    recon: f64,
}

fn score_batch(model: &ArCapsNet, params: &ParameterStore<f32>, data: &Dataset, idx: &[usize]) -> Result<BatchScore> {
    let images = data.batch_tensor(idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let fwd = model.forward(&mut g, &p, &images, Some(&labels), Mode::Infer, &mut rng_from_seed(0))?;
    let l = model.loss(&mut g, &fwd, &images, &labels)?;
    Ok(BatchScore {
        predictions: loss::predictions(g.value(fwd.scores))?,
        loss: g.value(l.total).item() as f64,
        margin: g.value(l.margin).item() as f64,
        recon: g.value(l.reconstruction).item() as f64,
    })
}

/// Accuracy, mean losses and confusion matrix over `data` in batches of
/// [`EVAL_BATCH`]. Batches are spread over `workers` threads; the result
/// does not depend on the worker count.
pub fn evaluate(model: &ArCapsNet, params: &ParameterStore<f32>, data: &Dataset, workers: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let batches: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_BATCH)
        .map(|c| c.to_vec())
        .collect();
    let groups = shards(batches.len(), workers);
    let scored: Vec<Result<Vec<BatchScore>>> = thread::scope(|s| {
        let handles: Vec<_> = groups
            .iter()
            .map(|r| {
                let mine = &batches[r.clone()];
                s.spawn(move || mine.iter().map(|b| score_batch(model, params, data, b)).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("evaluation worker panicked".into()))))
            .collect()
    });
    let classes = model.config().classes;
    let mut confusion = vec![vec![0u64; classes]; classes];
    let (mut loss_sum, mut margin_sum, mut recon_sum, mut correct) = (0.0, 0.0, 0.0, 0);
    let mut k = 0;
    for group in scored {
        for score in group? {
            let idx = &batches[k];
            k += 1;
            let n = idx.len() as f64;
            loss_sum += score.loss * n;
            margin_sum += score.margin * n;
            recon_sum += score.recon * n;
            for (&i, &p) in idx.iter().zip(&score.predictions) {
                let t = data.label(i);
                confusion[t][p] += 1;
                correct += usize::from(t == p);
            }
        }
    }
    let n = data.len() as f64;
    if !(loss_sum.is_finite() && margin_sum.is_finite() && recon_sum.is_finite()) {
        return Err(Error::Numerical("non-finite evaluation loss".into()));
    }
    Ok(Evaluation {
        count: data.len(),
        correct,
        accuracy: correct as f64 / n,
        loss: loss_sum / n,
        margin_loss: margin_sum / n,
        recon_loss: recon_sum / n,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_cover_the_range() {
        assert_eq!(shards(10, 3), [0..4, 4..7, 7..10]);
        assert_eq!(shards(2, 5), [0..1, 1..2]);
        assert_eq!(shards(7, 1), vec![0..7; 1]);
        assert_eq!(shards(0, 3), vec![0..0; 1]);
    }
}
