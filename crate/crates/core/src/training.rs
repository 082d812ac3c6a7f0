//! Optimiser, regularisation, early stopping and accuracy accounting shared
//! by backbone pretraining and attention training.

use std::io::Write;
use std::path::Path;

use crate::attention::{self, AttentionParams, LesionMask, RunOptions};
use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneModel, ForwardOptions};
use crate::data::{self, ImageDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-8;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam gradient" });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::shape("adam", "parameter set changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let step_size = (self.learning_rate as f64 / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *w -= step_size * *mv / (vv.sqrt() / c2_sqrt + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Stops once the watched metric has failed to improve for more than
/// `patience` consecutive epochs, keeping a snapshot of the best state.
#[derive(Clone, Debug)]
pub struct EarlyStopper<T> {
    patience: usize,
    best_metric: f32,
    best_epoch: usize,
    since_improvement: usize,
    best: Option<T>,
}

impl<T> EarlyStopper<T> {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_metric: f32::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            best: None,
        }
    }

    /// Starts from an already-measured state (e.g. epoch 0 before training).
    pub fn with_initial(patience: usize, epoch: usize, metric: f32, state: T) -> Self {
        EarlyStopper {
            patience,
            best_metric: metric,
            best_epoch: epoch,
            since_improvement: 0,
            best: Some(state),
        }
    }

    /// Records one epoch; `snapshot` is only called on improvement.
    /// Returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, metric: f32, snapshot: impl FnOnce() -> T) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            self.best = Some(snapshot());
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement > self.patience
    }

    pub fn best_metric(&self) -> f32 {
        self.best_metric
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }

    pub fn into_best(self) -> Option<T> {
        self.best
    }
}

/// `λ·Σw²` over the given weights, recorded on the tape.
pub fn l2_penalty(tape: &mut Tape, weights: &[Var], lambda: f32) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in weights {
        let s = tape.sum_squares(w)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    tape.scale(total, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_acc: f32,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_acc";

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.train_acc, r.val_acc)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Worker threads for evaluation: `GATTA_THREADS` if set, else the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("GATTA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Layers receiving modulation; `None` means all of them.
    pub lesion: Option<LesionMask>,
    pub iterations: usize,
    pub noise_sigma: f32,
    pub noise_seed: u64,
    pub clip_noise: bool,
    pub clamp_gains: bool,
    /// Overrides [`worker_threads`].
    pub threads: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 250,
            lesion: None,
            iterations: 1,
            noise_sigma: 0.0,
            noise_seed: 0,
            clip_noise: false,
            clamp_gains: false,
            threads: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub support: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f32,
    pub correct: usize,
    pub n: usize,
    pub mean_loss: f32,
    pub per_class: Vec<ClassStats>,
}

struct BatchResult {
    loss_sum: f64,
    predictions: Vec<usize>,
}

fn eval_batch(
    backbone: &BackboneModel,
    attention: Option<&AttentionParams>,
    data: &ImageDataset,
    range: std::ops::Range<usize>,
    opts: &EvalOptions,
) -> Result<BatchResult> {
    let idx: Vec<usize> = range.clone().collect();
    let (mut images, labels) = data.batch(&idx);
    if opts.noise_sigma > 0.0 {
        images = data::add_gaussian_noise_from(&images, opts.noise_sigma, opts.noise_seed, range.start, opts.clip_noise)?;
    }
    let mut tape = Tape::new();
    let bvars = backbone.bind(&mut tape, false);
    let x = tape.constant(images);
    let mut rng = seed::rng(0, &[]);
    let logits = match attention {
        Some(params) => {
            let pvars = params.bind(&mut tape, false);
            let run = RunOptions {
                iterations: opts.iterations,
                lesion: opts.lesion.clone(),
                training: false,
                clamp_gains: opts.clamp_gains,
                ..RunOptions::default()
            };
            attention::run_on_tape(&mut tape, backbone, &bvars, &pvars, x, &run, &mut rng)?.logits
        }
        None => {
            backbone
                .forward_on_tape(&mut tape, &bvars, x, &[], ForwardOptions::default(), &mut rng)?
                .0
        }
    };
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    Ok(BatchResult {
        loss_sum: tape.value(loss).data()[0] as f64 * labels.len() as f64,
        predictions: tape.value(logits).argmax_rows(),
    })
}

/// Top-1 accuracy (plus mean loss and per-class counts) of the backbone,
/// or of the attention-augmented model when `attention` is given. Dropout
/// is always off; input noise is seeded per image, so results do not depend
/// on batch size or thread count.
pub fn evaluate(
    backbone: &BackboneModel,
    attention: Option<&AttentionParams>,
    data: &ImageDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation split".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    let ranges: Vec<std::ops::Range<usize>> = (0..data.len())
        .step_by(opts.batch_size)
        .map(|s| s..(s + opts.batch_size).min(data.len()))
        .collect();
    let threads = opts.threads.unwrap_or_else(worker_threads).clamp(1, ranges.len());

    let results: Vec<Result<BatchResult>> = if threads == 1 {
        ranges
            .iter()
            .map(|r| eval_batch(backbone, attention, data, r.clone(), opts))
            .collect()
    } else {
        let per = ranges.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .chunks(per)
                .map(|chunk| {
                    s.spawn(move || {
                        chunk
                            .iter()
                            .map(|r| eval_batch(backbone, attention, data, r.clone(), opts))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };

    let mut per_class = vec![ClassStats::default(); data.num_classes()];
    let mut loss_sum = 0.0f64;
    let mut correct = 0;
    let mut i = 0;
    for r in results {
        let r = r?;
        loss_sum += r.loss_sum;
        for p in r.predictions {
            let label = data.labels()[i];
            per_class[label].support += 1;
            if p == label {
                per_class[label].correct += 1;
                correct += 1;
            }
            i += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f32 / data.len() as f32,
        correct,
        n: data.len(),
        mean_loss: (loss_sum / data.len() as f64) as f32,
        per_class,
    })
}
