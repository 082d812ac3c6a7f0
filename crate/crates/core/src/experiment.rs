//! Experiment configuration and the end-to-end commands behind the `gatta`
//! binary: pretraining, attention training, evaluation, noise and lesion
//! sweeps, map export and the parameter audit.
//!
//! Every command is a pure function of its config. Output files carry no
//! timestamps, so a rerun with the same config reproduces them byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::{self, AttentionHyper, AttentionParams, LesionMask, RunOptions, NAMED_MASKS};
use crate::backbone::{self, BackboneModel, Geometry, PretrainHyper, ToyCnnConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, CifarVariant, ImageDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::export::{self, NormalizedMap};
use crate::seed;
use crate::training::{self, EvalOptions};

/// Noise levels swept by default: log-spaced, covering both the mild
/// (0.03–0.04) and the near-chance (0.1–0.25) regimes.
pub const DEFAULT_NOISE_GRID: [f32; 8] = [0.0, 0.001, 0.003, 0.01, 0.03, 0.04, 0.1, 0.25];
/// Attention widths with reference results for the toy model.
pub const REFERENCE_DIMS: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Baseline,
    Augmented,
}

/// Everything a command needs. Defaults follow the toy-model recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_path: PathBuf,
    /// Training images kept from CIFAR outside long mode (0 keeps all).
    pub train_limit: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Generator knobs; `num_classes` is the synthetic class count.
    pub synthetic: SyntheticSpec,
    pub data_seed: u64,
    pub val_fraction: f32,
    /// Test images used by evaluation commands (0 uses all).
    pub eval_limit: usize,
    pub seed: u64,
    pub attention_dim: usize,
    pub iterations: usize,
    pub lesion: LesionMask,
    pub model: ModelChoice,
    pub noise_grid: Vec<f32>,
    pub noise_seed: u64,
    pub clip_noise: bool,
    pub clamp_gains: bool,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub backbone_patience: usize,
    pub backbone_max_epochs: usize,
    pub attention_patience: usize,
    pub attention_max_epochs: usize,
    pub backbone_dropout: f32,
    pub kq_dropout: f32,
    pub l2: f32,
    /// Augments backbone pretraining batches.
    pub augment: bool,
    /// Augments attention training batches. Off by default: attention
    /// trains on the original images.
    pub attention_augment: bool,
    pub export_images: usize,
    /// Defaults to `<out_dir>/backbone.gatta`.
    pub backbone_checkpoint: Option<PathBuf>,
    /// Defaults to `<out_dir>/attention.gatta`.
    pub attention_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Full CIFAR training set, no subsetting.
    pub long: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Cifar10,
            data_path: PathBuf::from("data/cifar-10-batches-bin"),
            train_limit: 5000,
            synthetic_train: 5000,
            synthetic_test: 1000,
            synthetic: SyntheticSpec::default(),
            data_seed: 0,
            val_fraction: 0.1,
            eval_limit: 0,
            seed: 0,
            attention_dim: 16,
            iterations: 1,
            lesion: "cccdd".parse().expect("valid mask"),
            model: ModelChoice::Augmented,
            noise_grid: DEFAULT_NOISE_GRID.to_vec(),
            noise_seed: 0,
            clip_noise: false,
            clamp_gains: false,
            learning_rate: 0.001,
            batch_size: 128,
            backbone_patience: 50,
            backbone_max_epochs: 500,
            attention_patience: 500,
            attention_max_epochs: 3000,
            backbone_dropout: 0.2,
            kq_dropout: attention::DEFAULT_KQ_DROPOUT,
            l2: attention::DEFAULT_L2,
            augment: true,
            attention_augment: false,
            export_images: 16,
            backbone_checkpoint: None,
            attention_checkpoint: None,
            out_dir: PathBuf::from("out"),
            long: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value for {key}: {value:?}")))
}

/// `lo,hi` with `0 <= lo <= hi`.
fn parse_range(key: &str, value: &str) -> Result<(f32, f32)> {
    let bad = || Error::InvalidArgument(format!("bad range for {key}: {value:?}"));
    let (lo, hi) = value.split_once(',').ok_or_else(bad)?;
    let (lo, hi): (f32, f32) = (parse(key, lo)?, parse(key, hi)?);
    if !(0.0 <= lo && lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean for {key}: {value:?}"))),
    }
}

impl ExperimentConfig {
    /// Sets one `key=value` entry, as found in a config file or `--set`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => {
                self.dataset = match v {
                    "cifar10" => DatasetKind::Cifar10,
                    "cifar100" => DatasetKind::Cifar100,
                    "synthetic" => DatasetKind::Synthetic,
                    _ => return Err(Error::InvalidArgument(format!("unknown dataset {v:?}"))),
                }
            }
            "data_path" => self.data_path = PathBuf::from(v),
            "train_limit" => self.train_limit = parse(key, v)?,
            "synthetic_train" => self.synthetic_train = parse(key, v)?,
            "synthetic_test" => self.synthetic_test = parse(key, v)?,
            "synthetic_classes" => self.synthetic.num_classes = parse(key, v)?,
            "synthetic_signal" => self.synthetic.signal = parse_range(key, v)?,
            "synthetic_distractor" => self.synthetic.distractor = parse_range(key, v)?,
            "synthetic_distractor_prob" => self.synthetic.distractor_prob = parse(key, v)?,
            "synthetic_noise" => self.synthetic.pixel_noise = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "eval_limit" => self.eval_limit = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "attention_dim" => self.attention_dim = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "lesion" => self.lesion = v.parse()?,
            "model" => {
                self.model = match v {
                    "baseline" => ModelChoice::Baseline,
                    "augmented" => ModelChoice::Augmented,
                    _ => return Err(Error::InvalidArgument(format!("unknown model {v:?}"))),
                }
            }
            "noise_grid" => {
                self.noise_grid = v.split(',').map(|s| parse(key, s)).collect::<Result<_>>()?;
            }
            "noise_seed" => self.noise_seed = parse(key, v)?,
            "clip_noise" => self.clip_noise = parse_bool(key, v)?,
            "clamp_gains" => self.clamp_gains = parse_bool(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "backbone_patience" => self.backbone_patience = parse(key, v)?,
            "backbone_max_epochs" => self.backbone_max_epochs = parse(key, v)?,
            "attention_patience" => self.attention_patience = parse(key, v)?,
            "attention_max_epochs" => self.attention_max_epochs = parse(key, v)?,
            "backbone_dropout" => self.backbone_dropout = parse(key, v)?,
            "kq_dropout" => self.kq_dropout = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "attention_augment" => self.attention_augment = parse_bool(key, v)?,
            "export_images" => self.export_images = parse(key, v)?,
            "backbone_checkpoint" => self.backbone_checkpoint = Some(PathBuf::from(v)),
            "attention_checkpoint" => self.attention_checkpoint = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "long" => self.long = parse_bool(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    /// Applies a config file's lines on top of `self`. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_assignment(line)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&fs::read_to_string(path)?)
    }

    /// The resolved config as `key=value` lines, readable by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        let grid = self.noise_grid.iter().map(f32::to_string).collect::<Vec<_>>().join(",");
        let model = match self.model {
            ModelChoice::Baseline => "baseline",
            ModelChoice::Augmented => "augmented",
        };
        let entries: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.name().into()),
            ("data_path", self.data_path.display().to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("synthetic_train", self.synthetic_train.to_string()),
            ("synthetic_test", self.synthetic_test.to_string()),
            ("synthetic_classes", self.synthetic.num_classes.to_string()),
            ("synthetic_signal", format!("{},{}", self.synthetic.signal.0, self.synthetic.signal.1)),
            (
                "synthetic_distractor",
                format!("{},{}", self.synthetic.distractor.0, self.synthetic.distractor.1),
            ),
            ("synthetic_distractor_prob", self.synthetic.distractor_prob.to_string()),
            ("synthetic_noise", self.synthetic.pixel_noise.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("seed", self.seed.to_string()),
            ("attention_dim", self.attention_dim.to_string()),
            ("iterations", self.iterations.to_string()),
            ("lesion", self.lesion.to_string()),
            ("model", model.into()),
            ("noise_grid", grid),
            ("noise_seed", self.noise_seed.to_string()),
            ("clip_noise", self.clip_noise.to_string()),
            ("clamp_gains", self.clamp_gains.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("backbone_patience", self.backbone_patience.to_string()),
            ("backbone_max_epochs", self.backbone_max_epochs.to_string()),
            ("attention_patience", self.attention_patience.to_string()),
            ("attention_max_epochs", self.attention_max_epochs.to_string()),
            ("backbone_dropout", self.backbone_dropout.to_string()),
            ("kq_dropout", self.kq_dropout.to_string()),
            ("l2", self.l2.to_string()),
            ("augment", self.augment.to_string()),
            ("attention_augment", self.attention_augment.to_string()),
            ("export_images", self.export_images.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("long", self.long.to_string()),
        ];
        let mut text: String = entries.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        for (key, explicit, resolved) in [
            ("backbone_checkpoint", &self.backbone_checkpoint, self.backbone_checkpoint()),
            ("attention_checkpoint", &self.attention_checkpoint, self.attention_checkpoint()),
        ] {
            match explicit {
                Some(p) => text += &format!("{key}={}\n", p.display()),
                None => text += &format!("# {key} defaults to {}\n", resolved.display()),
            }
        }
        text
    }

    /// Non-fatal remarks about unusual settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !REFERENCE_DIMS.contains(&self.attention_dim) {
            w.push(format!(
                "attention_dim={} is outside the reference set {REFERENCE_DIMS:?}",
                self.attention_dim
            ));
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.long && self.dataset == DatasetKind::Synthetic {
            return Err(Error::InvalidArgument("long mode needs a CIFAR dataset".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        let spec = &self.synthetic;
        if !(0.0..=1.0).contains(&spec.distractor_prob) || !(spec.pixel_noise >= 0.0) {
            return Err(Error::InvalidArgument(
                "synthetic_distractor_prob must lie in [0, 1] and synthetic_noise be >= 0".into(),
            ));
        }
        if self.noise_grid.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::InvalidArgument("noise levels must be >= 0".into()));
        }
        Ok(())
    }

    pub fn backbone_checkpoint(&self) -> PathBuf {
        self.backbone_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("backbone.gatta"))
    }

    pub fn attention_checkpoint(&self) -> PathBuf {
        self.attention_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("attention.gatta"))
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Synthetic => self.synthetic.num_classes,
        }
    }

    pub fn model_config(&self) -> ToyCnnConfig {
        ToyCnnConfig {
            dropout: self.backbone_dropout,
            ..ToyCnnConfig::with_classes(self.num_classes())
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            iterations: self.iterations,
            clip_noise: self.clip_noise,
            clamp_gains: self.clamp_gains,
            noise_seed: self.noise_seed,
            ..EvalOptions::default()
        }
    }
}

/// Train, validation and test splits of one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: ImageDataset,
    pub val: ImageDataset,
    pub test: ImageDataset,
}

/// Loads the configured dataset and carves the validation split out of the
/// training images.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    cfg.validate()?;
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let spec = cfg.synthetic.clone();
            let train = data::synthetic_dataset(cfg.synthetic_train, &spec, seed::derive(cfg.data_seed, &[1]))?;
            let test = data::synthetic_dataset(cfg.synthetic_test, &spec, seed::derive(cfg.data_seed, &[2]))?;
            let n = test.len();
            (train, test.subset(&(0..n).collect::<Vec<_>>(), Split::Test)?)
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let variant = if cfg.dataset == DatasetKind::Cifar10 {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let (train, test) = data::load_cifar(&cfg.data_path, variant)?;
            let train = if cfg.long || cfg.train_limit == 0 || cfg.train_limit >= train.len() {
                train
            } else {
                let mut order: Vec<usize> = (0..train.len()).collect();
                data::shuffle(&mut order, &mut seed::rng(cfg.data_seed, &[3]));
                order.truncate(cfg.train_limit);
                order.sort_unstable();
                train.subset(&order, Split::Train)?
            };
            (train, test)
        }
    };
    let (train, val) = train.split_validation(cfg.val_fraction, cfg.data_seed)?;
    let test = if cfg.eval_limit > 0 && cfg.eval_limit < test.len() {
        test.take(cfg.eval_limit)?
    } else {
        test
    };
    Ok(Splits { train, val, test })
}

fn write_config(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(format!("{command}.config")), cfg.to_text())?;
    Ok(())
}

fn load_backbone(cfg: &ExperimentConfig) -> Result<BackboneModel> {
    let ck = Checkpoint::load(&cfg.backbone_checkpoint())?;
    check_backbone(cfg, &ck.backbone)?;
    Ok(ck.backbone)
}

fn load_augmented(cfg: &ExperimentConfig) -> Result<(BackboneModel, AttentionParams)> {
    let ck = Checkpoint::load(&cfg.attention_checkpoint())?;
    check_backbone(cfg, &ck.backbone)?;
    let params = ck.attention.ok_or_else(|| {
        Error::Format(format!("{} holds no attention parameters", cfg.attention_checkpoint().display()))
    })?;
    Ok((ck.backbone, params))
}

fn check_backbone(cfg: &ExperimentConfig, model: &BackboneModel) -> Result<()> {
    let expected = cfg.model_config().param_count();
    if model.num_classes() != cfg.num_classes() || model.param_count() != expected {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} classes and {} parameters; config expects {} and {expected}",
            model.num_classes(),
            model.param_count(),
            cfg.num_classes()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_acc: f32,
    pub test_acc: f32,
    pub params: usize,
}

impl fmt::Display for PretrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "backbone: {} params, {} epochs, best epoch {} (val {:.4}), test {:.4}",
            self.params, self.epochs_run, self.best_epoch, self.best_val_acc, self.test_acc
        )
    }
}

/// Trains the backbone and writes its checkpoint plus
/// `backbone_history.csv`.
pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    let splits = load_splits(cfg)?;
    write_config(cfg, "pretrain-backbone")?;
    let model = BackboneModel::build(cfg.model_config(), cfg.seed)?;
    let hyper = PretrainHyper {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        patience: cfg.backbone_patience,
        max_epochs: cfg.backbone_max_epochs,
        augment: cfg.augment,
        seed: cfg.seed,
    };
    let out = backbone::pretrain(model, &splits.train, &splits.val, &hyper)?;
    training::write_history_csv(&cfg.out_dir.join("backbone_history.csv"), &out.history)?;
    Checkpoint::backbone_only(out.model.clone()).save(&cfg.backbone_checkpoint())?;
    let test_acc = training::evaluate(&out.model, None, &splits.test, &cfg.eval_options())?.accuracy;
    Ok(PretrainSummary {
        epochs_run: out.history.len(),
        best_epoch: out.best_epoch,
        best_val_acc: out.best_val_acc,
        test_acc,
        params: out.model.param_count(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary {
    pub trainable_params: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub baseline_val_acc: f32,
    pub best_val_acc: f32,
    pub baseline_test_acc: f32,
    pub augmented_test_acc: f32,
    pub alphas: Vec<f32>,
}

impl fmt::Display for AttentionSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "attention: {} trainable params, {} epochs, best epoch {} (val {:.4} -> {:.4}), test {:.4} -> {:.4}, alpha {:?}",
            self.trainable_params,
            self.epochs_run,
            self.best_epoch,
            self.baseline_val_acc,
            self.best_val_acc,
            self.baseline_test_acc,
            self.augmented_test_acc,
            self.alphas
        )
    }
}

/// Trains attention on top of the frozen backbone checkpoint. The output
/// checkpoint repeats the backbone bytes unchanged, followed by the
/// attention tensors; this is verified before returning.
pub fn train_attention(cfg: &ExperimentConfig) -> Result<AttentionSummary> {
    let splits = load_splits(cfg)?;
    let backbone = load_backbone(cfg)?.freeze();
    write_config(cfg, "train-attention")?;
    let params = AttentionParams::for_backbone(&backbone, cfg.attention_dim, cfg.seed)?;
    let trainable_params = params.param_count();
    let hyper = AttentionHyper {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        patience: cfg.attention_patience,
        max_epochs: cfg.attention_max_epochs,
        kq_dropout: cfg.kq_dropout,
        l2: cfg.l2,
        iterations: cfg.iterations,
        augment: cfg.attention_augment,
        clamp_gains: cfg.clamp_gains,
        seed: cfg.seed,
    };
    let out = attention::train_attention(&backbone, params, &splits.train, &splits.val, &hyper)?;
    training::write_history_csv(&cfg.out_dir.join("attention_history.csv"), &out.history)?;
    let backbone = backbone.into_inner();
    let ck = Checkpoint {
        backbone,
        attention: Some(out.params.clone()),
    };
    ck.save(&cfg.attention_checkpoint())?;

    let before = fs::read(&cfg.backbone_checkpoint())?;
    let after = fs::read(&cfg.attention_checkpoint())?;
    let (mb, ma) = (checkpoint::read_manifest(&before)?, checkpoint::read_manifest(&after)?);
    if before[mb.backbone_bytes()] != after[ma.backbone_bytes()] {
        return Err(Error::Format("backbone tensors changed during attention training".into()));
    }

    let opts = cfg.eval_options();
    let baseline_test_acc = training::evaluate(&ck.backbone, None, &splits.test, &opts)?.accuracy;
    let augmented_test_acc = training::evaluate(&ck.backbone, Some(&out.params), &splits.test, &opts)?.accuracy;
    Ok(AttentionSummary {
        trainable_params,
        epochs_run: out.history.len() - 1,
        best_epoch: out.best_epoch,
        baseline_val_acc: out.history[0].val_acc,
        best_val_acc: out.best_val_acc,
        baseline_test_acc,
        augmented_test_acc,
        alphas: out.params.alphas(),
    })
}

pub const EVAL_HEADER: &str = "model,lesion,iterations,sigma,accuracy,correct,n,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: ModelChoice,
    pub lesion: String,
    pub iterations: usize,
    pub sigma: f32,
    pub accuracy: f32,
    pub correct: usize,
    pub n: usize,
    pub seed: u64,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        let model = match self.model {
            ModelChoice::Baseline => "baseline",
            ModelChoice::Augmented => "augmented",
        };
        format!(
            "{model},{},{},{},{},{},{},{}",
            self.lesion, self.iterations, self.sigma, self.accuracy, self.correct, self.n, self.seed
        )
    }
}

/// Test-set accuracy of the configured model; writes `eval.csv`.
pub fn eval(cfg: &ExperimentConfig) -> Result<EvalRow> {
    let splits = load_splits(cfg)?;
    write_config(cfg, "eval")?;
    let opts = EvalOptions {
        lesion: Some(cfg.lesion.clone()),
        ..cfg.eval_options()
    };
    let report = match cfg.model {
        ModelChoice::Baseline => training::evaluate(&load_backbone(cfg)?, None, &splits.test, &opts)?,
        ModelChoice::Augmented => {
            let (b, p) = load_augmented(cfg)?;
            training::evaluate(&b, Some(&p), &splits.test, &opts)?
        }
    };
    let row = EvalRow {
        model: cfg.model,
        lesion: match cfg.model {
            ModelChoice::Baseline => ".".repeat(cfg.lesion.len()),
            ModelChoice::Augmented => cfg.lesion.to_string(),
        },
        iterations: cfg.iterations,
        sigma: 0.0,
        accuracy: report.accuracy,
        correct: report.correct,
        n: report.n,
        seed: cfg.seed,
    };
    export::write_csv(&cfg.out_dir.join("eval.csv"), EVAL_HEADER, &[row.csv()])?;
    Ok(row)
}

pub const NOISE_HEADER: &str = "sigma,baseline_acc,augmented_acc,gap_pp,n,noise_seed";

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub sigma: f32,
    pub baseline_acc: f32,
    pub augmented_acc: f32,
    pub n: usize,
}

impl NoiseRow {
    pub fn gap_pp(&self) -> f32 {
        (self.augmented_acc - self.baseline_acc) * 100.0
    }
}

/// Accuracy of the frozen backbone and of the augmented model under
/// additive Gaussian noise at every grid level; writes `noise_sweep.csv`.
/// Both models see identical noisy images at each level.
pub fn noise_sweep(cfg: &ExperimentConfig) -> Result<Vec<NoiseRow>> {
    let splits = load_splits(cfg)?;
    let (backbone, params) = load_augmented(cfg)?;
    write_config(cfg, "noise-sweep")?;
    let mut rows = Vec::new();
    for &sigma in &cfg.noise_grid {
        let opts = EvalOptions {
            noise_sigma: sigma,
            lesion: Some(cfg.lesion.clone()),
            ..cfg.eval_options()
        };
        let baseline_acc = training::evaluate(&backbone, None, &splits.test, &opts)?.accuracy;
        let augmented_acc = training::evaluate(&backbone, Some(&params), &splits.test, &opts)?.accuracy;
        rows.push(NoiseRow {
            sigma,
            baseline_acc,
            augmented_acc,
            n: splits.test.len(),
        });
    }
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.sigma,
                r.baseline_acc,
                r.augmented_acc,
                r.gap_pp(),
                r.n,
                cfg.noise_seed
            )
        })
        .collect();
    export::write_csv(&cfg.out_dir.join("noise_sweep.csv"), NOISE_HEADER, &lines)?;
    Ok(rows)
}

pub const LESION_HEADER: &str = "set,mask,accuracy,correct,n";

#[derive(Clone, Debug, PartialEq)]
pub struct LesionRow {
    /// `all` for the exhaustive sweep, `named` for the reference subset.
    pub set: &'static str,
    pub mask: String,
    pub accuracy: f32,
    pub correct: usize,
    pub n: usize,
}

/// Evaluates every lesion mask, then repeats the rows of the named subset;
/// writes `lesion_sweep.csv`.
pub fn lesion_sweep(cfg: &ExperimentConfig) -> Result<Vec<LesionRow>> {
    let splits = load_splits(cfg)?;
    let (backbone, params) = load_augmented(cfg)?;
    write_config(cfg, "lesion-sweep")?;
    let geoms = backbone.geometries();
    let named: Vec<LesionMask> = if geoms.len() == NAMED_MASKS[0].len() {
        NAMED_MASKS.iter().map(|m| m.parse()).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut cache: BTreeMap<String, (f32, usize)> = BTreeMap::new();
    let mut rows = Vec::new();
    let all = LesionMask::all(&geoms);
    for (set, masks) in [("all", &all), ("named", &named)] {
        for mask in masks {
            mask.check(&geoms)?;
            let key = mask.to_string();
            let (accuracy, correct) = match cache.get(&key) {
                Some(&hit) => hit,
                None => {
                    let opts = EvalOptions {
                        lesion: Some(mask.clone()),
                        ..cfg.eval_options()
                    };
                    let r = training::evaluate(&backbone, Some(&params), &splits.test, &opts)?;
                    cache.insert(key.clone(), (r.accuracy, r.correct));
                    (r.accuracy, r.correct)
                }
            };
            rows.push(LesionRow {
                set,
                mask: key,
                accuracy,
                correct,
                n: splits.test.len(),
            });
        }
    }
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{},{}", r.set, r.mask, r.accuracy, r.correct, r.n))
        .collect();
    export::write_csv(&cfg.out_dir.join("lesion_sweep.csv"), LESION_HEADER, &lines)?;
    Ok(rows)
}

pub const MAPS_HEADER: &str = "image,label,layer,width,height,min,max,constant,file";

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub images: usize,
    pub files: Vec<PathBuf>,
}

/// Writes, for the first `export_images` test images, the agreement maps
/// of the last modulated pass: conv layers as 16-bit PGM under
/// `export/maps/` with min/max in `export/maps.csv`, dense layers as
/// `export/gatta_<layer>.csv`, and the global queries as `export/q_avg.csv`.
pub fn export_maps(cfg: &ExperimentConfig) -> Result<ExportSummary> {
    let splits = load_splits(cfg)?;
    let (backbone, params) = load_augmented(cfg)?;
    write_config(cfg, "export-maps")?;
    let n = cfg.export_images.min(splits.test.len());
    if n == 0 {
        return Err(Error::InvalidArgument("export_images must be >= 1".into()));
    }
    let dir = cfg.out_dir.join("export");
    fs::create_dir_all(dir.join("maps"))?;
    let tags = backbone.config().layer_tags();
    let geoms = backbone.geometries();
    let mut files = Vec::new();
    let mut map_rows = Vec::new();
    let mut dense_rows: Vec<Vec<String>> = vec![Vec::new(); geoms.len()];
    let mut q_rows = Vec::new();

    let indices: Vec<usize> = (0..n).collect();
    let opts = RunOptions {
        iterations: cfg.iterations,
        lesion: Some(cfg.lesion.clone()),
        clamp_gains: cfg.clamp_gains,
        ..RunOptions::default()
    };
    for chunk in indices.chunks(64) {
        let (images, labels) = splits.test.batch(chunk);
        let out = attention::run(&backbone, &params, &images, &opts)?;
        let state = out.states.last().expect("at least one pass");
        for (bi, (&img, &label)) in chunk.iter().zip(&labels).enumerate() {
            for (li, (geom, tag)) in geoms.iter().zip(&tags).enumerate() {
                let g = state.gatta[li].slice_outer(bi, bi + 1)?;
                match *geom {
                    Geometry::Conv { height, width, .. } => {
                        let map = NormalizedMap::from_values(g.data(), width, height)?;
                        let name = format!("img{img:04}_{tag}.pgm");
                        let path = dir.join("maps").join(&name);
                        fs::write(&path, map.to_pgm())?;
                        files.push(path);
                        map_rows.push(format!(
                            "{img},{label},{tag},{width},{height},{},{},{},maps/{name}",
                            map.min,
                            map.max,
                            map.is_constant() as u8
                        ));
                    }
                    Geometry::Dense { .. } => dense_rows[li].push(export::vector_row(img, label, g.data())),
                }
            }
            q_rows.push(export::vector_row(img, label, state.global_query.slice_outer(bi, bi + 1)?.data()));
        }
    }
    let path = dir.join("maps.csv");
    export::write_csv(&path, MAPS_HEADER, &map_rows)?;
    files.push(path);
    for (li, (geom, tag)) in geoms.iter().zip(&tags).enumerate() {
        if let Geometry::Dense { units } = *geom {
            let path = dir.join(format!("gatta_{tag}.csv"));
            export::write_csv(&path, &export::vector_header("g", units), &dense_rows[li])?;
            files.push(path);
        }
    }
    let path = dir.join("q_avg.csv");
    export::write_csv(&path, &export::vector_header("q", params.dim()), &q_rows)?;
    files.push(path);
    Ok(ExportSummary { images: n, files })
}

pub const AUDIT_HEADER: &str = "model,num_classes,attention_dim,backbone_params,attention_params";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub model: String,
    pub num_classes: usize,
    pub attention_dim: usize,
    pub backbone_params: usize,
    pub attention_params: usize,
}

impl AuditRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.model, self.num_classes, self.attention_dim, self.backbone_params, self.attention_params
        )
    }
}

/// Closed-form parameter counts, cross-checked against instantiated
/// models, for both reference datasets and the configured one. Needs no
/// data or checkpoints.
pub fn param_audit(cfg: &ExperimentConfig) -> Result<Vec<AuditRow>> {
    let mut rows = Vec::new();
    let mut targets = vec![
        ("toy-cifar10".to_string(), ToyCnnConfig::cifar10(), 16),
        ("toy-cifar100".to_string(), ToyCnnConfig::cifar100(), 16),
    ];
    let own = cfg.model_config();
    if !(own.num_classes == 10 || own.num_classes == 100) || cfg.attention_dim != 16 {
        targets.push((format!("toy-{}", cfg.dataset.name()), own, cfg.attention_dim));
    }
    for (model, config, dim) in targets {
        let built = BackboneModel::build(config.clone(), 0)?;
        let att = AttentionParams::for_backbone(&built, dim, 0)?;
        let channels: Vec<usize> = config.geometries().iter().map(|g| g.channels()).collect();
        let closed = (config.param_count(), attention::attention_param_count(&channels, dim));
        if closed != (built.param_count(), att.param_count()) {
            return Err(Error::InvalidArgument(format!("{model}: closed-form counts disagree with built model")));
        }
        rows.push(AuditRow {
            model,
            num_classes: config.num_classes,
            attention_dim: dim,
            backbone_params: closed.0,
            attention_params: closed.1,
        });
    }
    let lines: Vec<String> = rows.iter().map(AuditRow::csv).collect();
    export::write_csv(&cfg.out_dir.join("param_audit.csv"), AUDIT_HEADER, &lines)?;
    Ok(rows)
}
