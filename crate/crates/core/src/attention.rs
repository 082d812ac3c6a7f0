//! Global attention agreement.
//!
//! Every tapped layer projects its activation into keys and queries of a
//! shared width `d`. Conv layers use a channel-wise linear map at every
//! spatial position; dense layers scale row `c` of the projection by unit
//! `c`'s activation. All queries are averaged into one global query per
//! image (first within each layer, then across layers), each key is scored
//! against it with a plain dot product, and the next forward pass scales
//! every activation by `1 + α·score` for its layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{
    ActivationBundle, BackboneModel, BackboneVars, ForwardOptions, FrozenBackbone, Geometry, LayerKind,
};
use crate::data::{self, ImageDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::training::{self, Adam, EarlyStopper, EpochRecord, EvalOptions};

pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_KQ_DROPOUT: f32 = 0.25;
pub const DEFAULT_L2: f32 = 1e-5;

/// Attention parameters of one tapped layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub geometry: Geometry,
    /// `[c, d]`
    pub key_weight: Tensor,
    /// `[d]`
    pub key_bias: Tensor,
    pub query_weight: Tensor,
    pub query_bias: Tensor,
    /// Modulation strength, shape `[1]`.
    pub alpha: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    dim: usize,
    pub layers: Vec<LayerAttention>,
}

/// `Σ_i 2·(c_i·d + d) + n_layers`: key and query matrices with biases, plus
/// one α per layer.
pub fn attention_param_count(channels: &[usize], dim: usize) -> usize {
    channels.iter().map(|&c| 2 * (c * dim + dim)).sum::<usize>() + channels.len()
}

const TENSORS_PER_LAYER: usize = 5;

impl AttentionParams {
    /// Uniform `[-s, s]` projections with `s = sqrt(6/(c+d))`, zero biases
    /// and α = 0, so the augmented model starts out identical to the backbone.
    pub fn init(geometries: &[Geometry], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("attention dimension 0".into()));
        }
        if geometries.is_empty() {
            return Err(Error::InvalidArgument("no layers attached to attention".into()));
        }
        let mut rng: ChaCha8Rng = seed::rng(seed, &[0xa77]);
        let layers = geometries
            .iter()
            .map(|&geometry| {
                let c = geometry.channels();
                let s = (6.0 / (c + dim) as f32).sqrt();
                let uniform = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[c, dim], |_| rng.random_range(-s..=s));
                LayerAttention {
                    geometry,
                    key_weight: uniform(&mut rng),
                    key_bias: Tensor::zeros(&[dim]),
                    query_weight: uniform(&mut rng),
                    query_bias: Tensor::zeros(&[dim]),
                    alpha: Tensor::scalar(0.0),
                }
            })
            .collect();
        Ok(AttentionParams { dim, layers })
    }

    pub fn for_backbone(backbone: &BackboneModel, dim: usize, seed: u64) -> Result<Self> {
        Self::init(&backbone.geometries(), dim, seed)
    }

    pub fn from_tensors(geometries: &[Geometry], dim: usize, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != geometries.len() * TENSORS_PER_LAYER {
            return Err(Error::Format(format!(
                "attention needs {} tensors, got {}",
                geometries.len() * TENSORS_PER_LAYER,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        for &geometry in geometries {
            let c = geometry.channels();
            let mut next = |shape: &[usize]| -> Result<Tensor> {
                let t = it.next().unwrap();
                if t.shape() != shape {
                    return Err(Error::Format(format!("attention tensor {:?}, expected {shape:?}", t.shape())));
                }
                Ok(t)
            };
            layers.push(LayerAttention {
                geometry,
                key_weight: next(&[c, dim])?,
                key_bias: next(&[dim])?,
                query_weight: next(&[c, dim])?,
                query_bias: next(&[dim])?,
                alpha: next(&[1])?,
            });
        }
        Ok(AttentionParams { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn geometries(&self) -> Vec<Geometry> {
        self.layers.iter().map(|l| l.geometry).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn alphas(&self) -> Vec<f32> {
        self.layers.iter().map(|l| l.alpha.data()[0]).collect()
    }

    /// Per layer: key weight, key bias, query weight, query bias, α.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.key_weight, &l.key_bias, &l.query_weight, &l.query_bias, &l.alpha])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.key_weight,
                    &mut l.key_bias,
                    &mut l.query_weight,
                    &mut l.query_bias,
                    &mut l.alpha,
                ]
            })
            .collect()
    }

    pub fn tensor_names(&self, tags: &[String]) -> Vec<String> {
        tags.iter()
            .flat_map(|t| {
                ["key_weight", "key_bias", "query_weight", "query_bias", "alpha"]
                    .map(|n| format!("attention.{t}.{n}"))
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerAttentionVars {
                key_weight: tape.leaf(l.key_weight.clone(), trainable),
                key_bias: tape.leaf(l.key_bias.clone(), trainable),
                query_weight: tape.leaf(l.query_weight.clone(), trainable),
                query_bias: tape.leaf(l.query_bias.clone(), trainable),
                alpha: tape.leaf(l.alpha.clone(), trainable),
            })
            .collect();
        AttentionVars { layers }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerAttentionVars {
    pub key_weight: Var,
    pub key_bias: Var,
    pub query_weight: Var,
    pub query_bias: Var,
    pub alpha: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub layers: Vec<LayerAttentionVars>,
}

impl AttentionVars {
    /// Regroups handles given in [`AttentionParams::tensors`] order.
    pub fn from_handles(handles: &[Var]) -> Result<Self> {
        if handles.is_empty() || handles.len() % TENSORS_PER_LAYER != 0 {
            return Err(Error::shape("attention handles", format!("{} handles", handles.len())));
        }
        let layers = handles
            .chunks(TENSORS_PER_LAYER)
            .map(|c| LayerAttentionVars {
                key_weight: c[0],
                key_bias: c[1],
                query_weight: c[2],
                query_bias: c[3],
                alpha: c[4],
            })
            .collect();
        Ok(AttentionVars { layers })
    }

    /// Handles in [`AttentionParams::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.key_weight, l.key_bias, l.query_weight, l.query_bias, l.alpha])
            .collect()
    }

    /// The projection matrices (no biases, no α).
    pub fn projection_weights(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.key_weight, l.query_weight]).collect()
    }
}

/// Which layers receive modulation, written one character per tapped layer:
/// the layer's letter (`c` conv, `d` dense) when modulated, `.` when not.
/// Lesioned layers still contribute their queries to the global query.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LesionMask {
    slots: Vec<Option<LayerKind>>,
}

/// Masks discussed for the toy model: the baseline, the full model, every
/// single-layer ablation and every single-layer-only variant.
pub const NAMED_MASKS: [&str; 12] = [
    ".....", "cccdd", ".ccdd", "c.cdd", "cc.dd", "ccc.d", "cccd.", "c....", ".c...", "..c..", "...d.", "....d",
];

impl LesionMask {
    /// Every layer modulated.
    pub fn full(geometries: &[Geometry]) -> Self {
        LesionMask {
            slots: geometries.iter().map(|g| Some(g.kind())).collect(),
        }
    }

    /// No layer modulated.
    pub fn none(n_layers: usize) -> Self {
        LesionMask {
            slots: vec![None; n_layers],
        }
    }

    /// All `2^n` masks, from no modulation to full modulation, where bit
    /// `n-1-i` of the index switches layer `i`.
    pub fn all(geometries: &[Geometry]) -> Vec<Self> {
        let n = geometries.len();
        (0..1usize << n)
            .map(|bits| LesionMask {
                slots: geometries
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (bits >> (n - 1 - i) & 1 == 1).then(|| g.kind()))
                    .collect(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn modulates(&self, layer: usize) -> bool {
        self.slots.get(layer).is_some_and(Option::is_some)
    }

    pub fn check(&self, geometries: &[Geometry]) -> Result<()> {
        let err = |reason: String| Error::Lesion {
            mask: self.to_string(),
            reason,
        };
        if self.slots.len() != geometries.len() {
            return Err(err(format!("{} characters for {} layers", self.slots.len(), geometries.len())));
        }
        for (i, (slot, g)) in self.slots.iter().zip(geometries).enumerate() {
            if let Some(kind) = slot {
                if *kind != g.kind() {
                    return Err(err(format!("position {} is a {:?} layer", i + 1, g.kind())));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for LesionMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let slots = s
            .chars()
            .map(|ch| match ch {
                'c' => Ok(Some(LayerKind::Conv)),
                'd' => Ok(Some(LayerKind::Dense)),
                '.' => Ok(None),
                other => Err(Error::Lesion {
                    mask: s.to_string(),
                    reason: format!("unexpected character {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        if slots.is_empty() {
            return Err(Error::Lesion {
                mask: s.to_string(),
                reason: "empty".into(),
            });
        }
        Ok(LesionMask { slots })
    }
}

impl fmt::Display for LesionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for slot in &self.slots {
            let ch = slot.map_or('.', LayerKind::letter);
            write!(f, "{ch}")?;
        }
        Ok(())
    }
}

/// Keys and queries of one layer: `[b,h,w,d]` for conv, `[b,c,d]` for dense.
#[derive(Clone, Copy, Debug)]
pub struct KeyQuery {
    pub keys: Var,
    pub queries: Var,
}

/// Projects every tapped activation into keys and queries. With
/// `training`, dropout of rate `dropout` is applied to both.
pub fn project<R: Rng + ?Sized>(
    tape: &mut Tape,
    bundle: &ActivationBundle,
    vars: &AttentionVars,
    dropout: f32,
    training: bool,
    rng: &mut R,
) -> Result<Vec<KeyQuery>> {
    if bundle.len() != vars.layers.len() {
        return Err(Error::shape(
            "project",
            format!("{} activations for {} attention layers", bundle.len(), vars.layers.len()),
        ));
    }
    let mut out = Vec::with_capacity(bundle.len());
    for (rec, lv) in bundle.records.iter().zip(&vars.layers) {
        let c = rec.geometry.channels();
        if tape.shape(lv.key_weight)[0] != c {
            return Err(Error::shape(
                "project",
                format!("layer {} has {c} channels, projection has {}", rec.tag, tape.shape(lv.key_weight)[0]),
            ));
        }
        let (keys, queries) = match rec.geometry {
            Geometry::Conv { .. } => (
                tape.linear(rec.activation, lv.key_weight, lv.key_bias)?,
                tape.linear(rec.activation, lv.query_weight, lv.query_bias)?,
            ),
            Geometry::Dense { .. } => (
                tape.unit_projection(rec.activation, lv.key_weight, lv.key_bias)?,
                tape.unit_projection(rec.activation, lv.query_weight, lv.query_bias)?,
            ),
        };
        let keys = tape.dropout(keys, dropout, training, rng)?;
        let queries = tape.dropout(queries, dropout, training, rng)?;
        out.push(KeyQuery { keys, queries });
    }
    Ok(out)
}

/// Two-stage mean of all queries: over positions (or units) within each
/// layer, then uniformly over layers. Returns `[b, d]`.
pub fn pool_global_query(tape: &mut Tape, queries: &[Var]) -> Result<Var> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no attached layers to pool queries from".into()));
    }
    let mut total: Option<Var> = None;
    for &q in queries {
        let rank = tape.shape(q).len();
        if rank < 3 {
            return Err(Error::shape("pool_global_query", format!("queries {:?}", tape.shape(q))));
        }
        let axes: Vec<usize> = (1..rank - 1).collect();
        let layer_mean = tape.mean_over_axes(q, &axes)?;
        total = Some(match total {
            Some(t) => tape.add(t, layer_mean)?,
            None => layer_mean,
        });
    }
    tape.scale(total.unwrap(), 1.0 / queries.len() as f32)
}

/// Agreement score of every key with the global query: `[b,h,w]` for conv
/// layers, `[b,c]` for dense layers.
pub fn agreement(tape: &mut Tape, keys: &[Var], global_query: Var) -> Result<Vec<Var>> {
    keys.iter().map(|&k| tape.dot_last(k, global_query)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Modulated passes after the initial clean pass.
    pub iterations: usize,
    /// `None` modulates every layer.
    pub lesion: Option<LesionMask>,
    /// Enables key/query dropout. Backbone dropout always stays off.
    pub training: bool,
    pub clamp_gains: bool,
    pub kq_dropout: f32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            iterations: 1,
            lesion: None,
            training: false,
            clamp_gains: false,
            kq_dropout: DEFAULT_KQ_DROPOUT,
        }
    }
}

/// Attention quantities computed from one pass, which set the gains of the
/// following pass.
#[derive(Clone, Debug)]
pub struct GattaStateVars {
    pub key_queries: Vec<KeyQuery>,
    pub global_query: Var,
    pub gatta: Vec<Var>,
    /// `α·gatta` for modulated layers.
    pub gains: Vec<Option<Var>>,
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub logits: Var,
    pub states: Vec<GattaStateVars>,
}

/// Clean pass, then `iterations` modulated passes. Pass `t` scales each
/// non-lesioned layer by `1 + α·gatta` computed from pass `t-1`.
pub fn run_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    backbone: &BackboneModel,
    bvars: &BackboneVars,
    pvars: &AttentionVars,
    images: Var,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<RunTrace> {
    if opts.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let geoms = backbone.geometries();
    if pvars.layers.len() != geoms.len() {
        return Err(Error::shape(
            "run",
            format!("{} attention layers for {} backbone layers", pvars.layers.len(), geoms.len()),
        ));
    }
    let lesion = match &opts.lesion {
        Some(m) => {
            m.check(&geoms)?;
            m.clone()
        }
        None => LesionMask::full(&geoms),
    };
    let fwd = ForwardOptions {
        training: false,
        clamp_gains: opts.clamp_gains,
    };
    let (mut logits, mut bundle) = backbone.forward_on_tape(tape, bvars, images, &[], fwd, rng)?;
    let mut states = Vec::with_capacity(opts.iterations);
    for _ in 0..opts.iterations {
        let key_queries = project(tape, &bundle, pvars, opts.kq_dropout, opts.training, rng)?;
        let queries: Vec<Var> = key_queries.iter().map(|kq| kq.queries).collect();
        let keys: Vec<Var> = key_queries.iter().map(|kq| kq.keys).collect();
        let global_query = pool_global_query(tape, &queries)?;
        let gatta = agreement(tape, &keys, global_query)?;
        let mut gains = Vec::with_capacity(gatta.len());
        for (i, (&g, lv)) in gatta.iter().zip(&pvars.layers).enumerate() {
            gains.push(if lesion.modulates(i) {
                Some(tape.scale_by(g, lv.alpha)?)
            } else {
                None
            });
        }
        (logits, bundle) = backbone.forward_on_tape(tape, bvars, images, &gains, fwd, rng)?;
        states.push(GattaStateVars {
            key_queries,
            global_query,
            gatta,
            gains,
        });
    }
    Ok(RunTrace { logits, states })
}

/// Materialised attention state of one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GattaState {
    pub keys: Vec<Tensor>,
    pub queries: Vec<Tensor>,
    /// `[b, d]`
    pub global_query: Tensor,
    pub gatta: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub logits: Tensor,
    pub states: Vec<GattaState>,
}

/// Evaluation-mode [`run_on_tape`] on a fresh tape.
pub fn run(backbone: &BackboneModel, params: &AttentionParams, images: &Tensor, opts: &RunOptions) -> Result<RunOutput> {
    let mut tape = Tape::new();
    let bvars = backbone.bind(&mut tape, false);
    let pvars = params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let mut rng = seed::rng(0, &[0x7a9]);
    let trace = run_on_tape(&mut tape, backbone, &bvars, &pvars, x, opts, &mut rng)?;
    let states = trace
        .states
        .iter()
        .map(|s| GattaState {
            keys: s.key_queries.iter().map(|kq| tape.value(kq.keys).clone()).collect(),
            queries: s.key_queries.iter().map(|kq| tape.value(kq.queries).clone()).collect(),
            global_query: tape.value(s.global_query).clone(),
            gatta: s.gatta.iter().map(|&g| tape.value(g).clone()).collect(),
        })
        .collect();
    Ok(RunOutput {
        logits: tape.value(trace.logits).clone(),
        states,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHyper {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub kq_dropout: f32,
    pub l2: f32,
    pub iterations: usize,
    /// Off by default: with augmented batches, attention gains on the
    /// augmented training images while validation accuracy falls.
    pub augment: bool,
    pub clamp_gains: bool,
    pub seed: u64,
}

impl Default for AttentionHyper {
    fn default() -> Self {
        AttentionHyper {
            learning_rate: 0.001,
            batch_size: 128,
            patience: 500,
            max_epochs: 1000,
            kq_dropout: DEFAULT_KQ_DROPOUT,
            l2: DEFAULT_L2,
            iterations: 1,
            augment: false,
            clamp_gains: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutcome {
    /// Parameters from the best validation epoch (epoch 0 is the untrained state).
    pub params: AttentionParams,
    /// Starts with the epoch-0 row measured before any update.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f32,
}

/// Trains key/query projections, their biases and the α values by Adam on
/// the cross-entropy of the final-pass logits plus L2 on the projection
/// matrices. The backbone is only read.
pub fn train_attention(
    backbone: &FrozenBackbone,
    mut params: AttentionParams,
    train: &ImageDataset,
    val: &ImageDataset,
    hyper: &AttentionHyper,
) -> Result<AttentionOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset("attention training needs train and val images".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    if params.geometries() != backbone.geometries() {
        return Err(Error::InvalidArgument("attention parameters do not match the backbone".into()));
    }
    let eval_opts = EvalOptions {
        iterations: hyper.iterations,
        clamp_gains: hyper.clamp_gains,
        ..EvalOptions::default()
    };
    let train_eval = training::evaluate(backbone, Some(&params), train, &eval_opts)?;
    let val0 = training::evaluate(backbone, Some(&params), val, &eval_opts)?.accuracy;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: train_eval.mean_loss,
        train_acc: train_eval.accuracy,
        val_acc: val0,
    }];
    let mut stopper = EarlyStopper::with_initial(hyper.patience, 0, val0, params.clone());
    let mut adam = Adam::new(hyper.learning_rate);
    let run_opts = RunOptions {
        iterations: hyper.iterations,
        lesion: None,
        training: true,
        clamp_gains: hyper.clamp_gains,
        kq_dropout: hyper.kq_dropout,
    };

    for epoch in 1..=hyper.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        data::shuffle(&mut order, &mut seed::rng(hyper.seed, &[0xa7e0, epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let (mut images, labels) = train.batch(chunk);
            if hyper.augment {
                images = data::augment(&images, seed::derive(hyper.seed, &[0xa7a6, epoch as u64, bi as u64]))?;
            }
            let mut rng = seed::rng(hyper.seed, &[0xa7d0, epoch as u64, bi as u64]);
            let mut tape = Tape::new();
            let bvars = backbone.bind(&mut tape, false);
            let pvars = params.bind(&mut tape, true);
            let x = tape.constant(images);
            let trace = run_on_tape(&mut tape, backbone, &bvars, &pvars, x, &run_opts, &mut rng)?;
            let ce = tape.softmax_cross_entropy(trace.logits, &labels)?;
            loss_sum += tape.value(ce).data()[0] as f64 * labels.len() as f64;
            correct += training::count_correct(tape.value(trace.logits), &labels);
            let penalty = training::l2_penalty(&mut tape, &pvars.projection_weights(), hyper.l2)?;
            let loss = tape.add(ce, penalty)?;
            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<Tensor> = pvars
                .all()
                .iter()
                .zip(params.tensors())
                .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
                .collect();
            adam.step(&mut params.tensors_mut(), &grad_tensors)?;
        }
        let val_acc = training::evaluate(backbone, Some(&params), val, &eval_opts)?.accuracy;
        history.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / train.len() as f64) as f32,
            train_acc: correct as f32 / train.len() as f32,
            val_acc,
        });
        if stopper.observe(epoch, val_acc, || params.clone()) {
            break;
        }
    }
    let best_epoch = stopper.best_epoch();
    let best_val_acc = stopper.best_metric();
    let params = stopper.into_best().unwrap_or(params);
    Ok(AttentionOutcome {
        params,
        history,
        best_epoch,
        best_val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyCnnConfig;
    use rand::SeedableRng;

    fn toy_geoms() -> Vec<Geometry> {
        ToyCnnConfig::cifar10().geometries()
    }

    #[test]
    fn parameter_counts() {
        let c10: Vec<usize> = ToyCnnConfig::cifar10().geometries().iter().map(|g| g.channels()).collect();
        let c100: Vec<usize> = ToyCnnConfig::cifar100().geometries().iter().map(|g| g.channels()).collect();
        assert_eq!(attention_param_count(&c10, 16), 15_845);
        assert_eq!(attention_param_count(&c100, 16), 18_725);
        let p = AttentionParams::init(&toy_geoms(), 16, 0).unwrap();
        assert_eq!(p.param_count(), 15_845);
        assert!(p.alphas().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn wider_dims_scale_linearly() {
        let c100: Vec<usize> = ToyCnnConfig::cifar100().geometries().iter().map(|g| g.channels()).collect();
        // 37.4K and 74.9K after rounding
        assert_eq!(attention_param_count(&c100, 32), 37_445);
        assert_eq!(attention_param_count(&c100, 64), 74_885);
    }

    #[test]
    fn mask_parsing_and_display() {
        let m: LesionMask = "c.cdd".parse().unwrap();
        assert!(m.modulates(0) && !m.modulates(1) && m.modulates(2) && m.modulates(3) && m.modulates(4));
        assert_eq!(m.to_string(), "c.cdd");
        assert!(m.check(&toy_geoms()).is_ok());
        assert!("ccxdd".parse::<LesionMask>().is_err());
        assert!("".parse::<LesionMask>().is_err());
        assert!("cccd".parse::<LesionMask>().unwrap().check(&toy_geoms()).is_err());
        assert!("ddccc".parse::<LesionMask>().unwrap().check(&toy_geoms()).is_err());
        for name in NAMED_MASKS {
            name.parse::<LesionMask>().unwrap().check(&toy_geoms()).unwrap();
        }
    }

    #[test]
    fn all_masks_enumerates_every_subset_once() {
        let all = LesionMask::all(&toy_geoms());
        assert_eq!(all.len(), 32);
        assert_eq!(all[0].to_string(), ".....");
        assert_eq!(all[31].to_string(), "cccdd");
        let unique: std::collections::HashSet<String> = all.iter().map(|m| m.to_string()).collect();
        assert_eq!(unique.len(), 32);
        assert_eq!(LesionMask::none(5).to_string(), ".....");
        assert_eq!(LesionMask::full(&toy_geoms()).to_string(), "cccdd");
    }

    #[test]
    fn one_hot_conv_projection() {
        let mut tape = Tape::new();
        let mut act = Tensor::zeros(&[1, 2, 2, 3]);
        let v = 1.75;
        // position (y=1, x=0), channel 2
        act.data_mut()[(2 * 3) + 2] = v;
        let a = tape.constant(act);
        let k = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.5 - 1.0);
        let kv = tape.constant(k.clone());
        let zero = tape.constant(Tensor::zeros(&[4]));
        let keys = tape.linear(a, kv, zero).unwrap();
        let got = &tape.value(keys).data()[2 * 4..3 * 4];
        let want: Vec<f32> = k.data()[2 * 4..3 * 4].iter().map(|x| x * v).collect();
        assert_eq!(got, &want[..]);
    }

    #[test]
    fn dense_projection_is_row_scaling() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 2.0, 0.0]).unwrap());
        let k = Tensor::from_fn(&[3, 4], |i| i as f32);
        let kv = tape.constant(k.clone());
        let zero = tape.constant(Tensor::zeros(&[4]));
        let keys = tape.unit_projection(a, kv, zero).unwrap();
        assert_eq!(&tape.value(keys).data()[4..8], &[8.0, 10.0, 12.0, 14.0]);
    }

    #[test]
    fn global_query_of_constant_queries() {
        let mut tape = Tape::new();
        let v = [0.5, -1.0, 2.0];
        let conv = tape.constant(Tensor::from_fn(&[1, 4, 4, 3], |i| v[i % 3]));
        let dense = tape.constant(Tensor::from_fn(&[1, 7, 3], |i| v[i % 3]));
        let q = pool_global_query(&mut tape, &[conv, dense]).unwrap();
        assert_eq!(tape.value(q).data(), &v);
    }

    #[test]
    fn global_query_weights_layers_equally() {
        let mut tape = Tape::new();
        let u = [1.0, 0.0];
        let w = [0.0, 3.0];
        let big = tape.constant(Tensor::from_fn(&[1, 8, 8, 2], |i| u[i % 2]));
        let small = tape.constant(Tensor::from_fn(&[1, 2, 2], |i| w[i % 2]));
        let q = pool_global_query(&mut tape, &[big, small]).unwrap();
        assert_eq!(tape.value(q).data(), &[0.5, 1.5]);
        assert!(pool_global_query(&mut tape, &[]).is_err());
    }

    #[test]
    fn agreement_self_and_orthogonal() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let keys = tape.constant(Tensor::new(vec![1, 2, 2], vec![3.0, 4.0, -4.0, 3.0]).unwrap());
        let g = agreement(&mut tape, &[keys], q).unwrap();
        assert_eq!(tape.value(g[0]).data(), &[25.0, 0.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(agreement(&mut tape, &[bad], q).is_err());
    }

    fn small_model() -> (BackboneModel, AttentionParams, Tensor) {
        let m = BackboneModel::build(ToyCnnConfig::with_classes(4), 11).unwrap();
        let p = AttentionParams::for_backbone(&m, 8, 12).unwrap();
        let x = Tensor::from_fn(&[2, 32, 32, 3], |i| ((i * 2654435761usize) % 1000) as f32 / 1000.0);
        (m, p, x)
    }

    #[test]
    fn zero_alpha_reproduces_backbone_for_any_iterations() {
        let (m, p, x) = small_model();
        let base = m.forward(&x, None, ForwardOptions::default(), 0).unwrap();
        for iterations in 1..=3 {
            let out = run(&m, &p, &x, &RunOptions { iterations, ..RunOptions::default() }).unwrap();
            assert_eq!(&out.logits, base.logits());
            assert_eq!(out.states.len(), iterations);
        }
    }

    #[test]
    fn lesion_extremes() {
        let (m, mut p, x) = small_model();
        for (i, l) in p.layers.iter_mut().enumerate() {
            l.alpha = Tensor::scalar(0.01 * (i as f32 + 1.0));
        }
        let base = m.forward(&x, None, ForwardOptions::default(), 0).unwrap();
        let none = RunOptions {
            lesion: Some(".....".parse().unwrap()),
            ..RunOptions::default()
        };
        assert_eq!(&run(&m, &p, &x, &none).unwrap().logits, base.logits());

        let unlesioned = run(&m, &p, &x, &RunOptions::default()).unwrap();
        let full = RunOptions {
            lesion: Some("cccdd".parse().unwrap()),
            ..RunOptions::default()
        };
        assert_eq!(run(&m, &p, &x, &full).unwrap().logits, unlesioned.logits);
        assert_ne!(&unlesioned.logits, base.logits());
    }

    #[test]
    fn lesioning_one_layer_keeps_first_pass_gatta_of_others() {
        let (m, mut p, x) = small_model();
        for l in p.layers.iter_mut() {
            l.alpha = Tensor::scalar(0.05);
        }
        let full = run(&m, &p, &x, &RunOptions::default()).unwrap();
        let lesioned = run(
            &m,
            &p,
            &x,
            &RunOptions {
                lesion: Some("c.cdd".parse().unwrap()),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(full.states[0].gatta, lesioned.states[0].gatta);
        assert_eq!(full.states[0].global_query, lesioned.states[0].global_query);
    }

    #[test]
    fn bad_lesion_and_zero_iterations_are_errors() {
        let (m, p, x) = small_model();
        let bad = RunOptions {
            lesion: Some("cc".parse().unwrap()),
            ..RunOptions::default()
        };
        assert!(matches!(run(&m, &p, &x, &bad), Err(Error::Lesion { .. })));
        let zero = RunOptions {
            iterations: 0,
            ..RunOptions::default()
        };
        assert!(run(&m, &p, &x, &zero).is_err());
    }

    #[test]
    fn training_dropout_only_touches_keys_and_queries() {
        let (m, p, x) = small_model();
        let mut tape = Tape::new();
        let bvars = m.bind(&mut tape, false);
        let pvars = p.bind(&mut tape, true);
        let xv = tape.constant(x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = RunOptions {
            training: true,
            ..RunOptions::default()
        };
        let trace = run_on_tape(&mut tape, &m, &bvars, &pvars, xv, &opts, &mut rng).unwrap();
        let kq = trace.states[0].key_queries[0];
        let zeros = tape.value(kq.keys).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f32 / tape.value(kq.keys).len() as f32;
        assert!((frac - 0.25).abs() < 0.05, "dropped fraction {frac}");
    }

    #[test]
    fn from_tensors_round_trip() {
        let p = AttentionParams::init(&toy_geoms(), 4, 3).unwrap();
        let ts: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        assert_eq!(AttentionParams::from_tensors(&toy_geoms(), 4, ts.clone()).unwrap(), p);
        assert!(AttentionParams::from_tensors(&toy_geoms(), 8, ts).is_err());
    }
}
