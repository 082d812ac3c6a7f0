//! The toy CNN: three 3×3 conv stages (ReLU, 2×2 max pool) followed by a
//! ReLU dense layer and a linear classifier, with every layer tapped for
//! the attention system.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{self, ImageDataset, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::training::{self, Adam, EarlyStopper, EpochRecord, EvalOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Dense,
}

impl LayerKind {
    pub fn letter(self) -> char {
        match self {
            LayerKind::Conv => 'c',
            LayerKind::Dense => 'd',
        }
    }
}

/// Shape of one tapped activation, per batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Conv { height: usize, width: usize, channels: usize },
    Dense { units: usize },
}

impl Geometry {
    pub fn kind(self) -> LayerKind {
        match self {
            Geometry::Conv { .. } => LayerKind::Conv,
            Geometry::Dense { .. } => LayerKind::Dense,
        }
    }

    /// Feature width seen by the key/query projections (`c_i` or `c_j`).
    pub fn channels(self) -> usize {
        match self {
            Geometry::Conv { channels, .. } => channels,
            Geometry::Dense { units } => units,
        }
    }

    /// Shape of the per-location gain map for a batch of `b`.
    pub fn gain_shape(self, b: usize) -> Vec<usize> {
        match self {
            Geometry::Conv { height, width, .. } => vec![b, height, width],
            Geometry::Dense { units } => vec![b, units],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCnnConfig {
    pub image_size: usize,
    pub input_channels: usize,
    pub conv_channels: Vec<usize>,
    pub dense_width: usize,
    pub num_classes: usize,
    pub dropout: f32,
}

impl ToyCnnConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        ToyCnnConfig {
            image_size: IMAGE_SIZE,
            input_channels: CHANNELS,
            conv_channels: vec![32, 64, 128],
            dense_width: 256,
            num_classes,
            dropout: 0.2,
        }
    }

    pub fn cifar10() -> Self {
        Self::with_classes(10)
    }

    pub fn cifar100() -> Self {
        Self::with_classes(100)
    }

    pub fn validate(&self) -> Result<()> {
        let pools = 1usize << self.conv_channels.len();
        if self.conv_channels.is_empty() || self.image_size % pools != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} cannot be halved {} times",
                self.image_size,
                self.conv_channels.len()
            )));
        }
        if self.num_classes < 2 || self.dense_width == 0 || self.conv_channels.contains(&0) {
            return Err(Error::InvalidArgument("degenerate layer width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }

    pub fn flatten_len(&self) -> usize {
        let side = self.image_size >> self.conv_channels.len();
        side * side * self.conv_channels.last().copied().unwrap_or(0)
    }

    /// Tapped layers in forward order: conv stages then both dense layers.
    pub fn geometries(&self) -> Vec<Geometry> {
        let mut out = Vec::new();
        let mut side = self.image_size;
        for &c in &self.conv_channels {
            out.push(Geometry::Conv {
                height: side,
                width: side,
                channels: c,
            });
            side /= 2;
        }
        out.push(Geometry::Dense { units: self.dense_width });
        out.push(Geometry::Dense {
            units: self.num_classes,
        });
        out
    }

    pub fn layer_tags(&self) -> Vec<String> {
        let n_conv = self.conv_channels.len();
        (0..n_conv)
            .map(|i| format!("c{}", i + 1))
            .chain((1..=2).map(|j| format!("d{j}")))
            .collect()
    }

    /// Closed-form weight + bias count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.input_channels;
        for &c in &self.conv_channels {
            total += 9 * c_in * c + c;
            c_in = c;
        }
        total += self.flatten_len() * self.dense_width + self.dense_width;
        total += self.dense_width * self.num_classes + self.num_classes;
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[3, 3, c_in, c_out]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    config: ToyCnnConfig,
    pub conv: Vec<ConvLayer>,
    pub dense: Vec<DenseLayer>,
}

/// Backbone parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    conv: Vec<(Var, Var)>,
    dense: Vec<(Var, Var)>,
}

impl BackboneVars {
    /// Regroups handles given in [`BackboneModel::tensors`] order.
    pub fn from_handles(config: &ToyCnnConfig, handles: &[Var]) -> Result<Self> {
        let n_conv = config.conv_channels.len();
        if handles.len() != 2 * (n_conv + 2) {
            return Err(Error::shape("backbone handles", format!("{} handles for {} layers", handles.len(), n_conv + 2)));
        }
        let pairs: Vec<(Var, Var)> = handles.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(BackboneVars {
            conv: pairs[..n_conv].to_vec(),
            dense: pairs[n_conv..].to_vec(),
        })
    }

    /// All handles in [`BackboneModel::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        self.conv
            .iter()
            .chain(&self.dense)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ActivationRecord {
    pub tag: String,
    pub geometry: Geometry,
    pub activation: Var,
}

/// The tapped activations of one forward pass, in layer order. Conv
/// activations are post-ReLU and pre-pooling, `d1` is post-ReLU and `d2`
/// holds the pre-softmax logits. When gains were applied these are the
/// modulated values.
#[derive(Clone, Debug, Default)]
pub struct ActivationBundle {
    pub records: Vec<ActivationRecord>,
}

impl ActivationBundle {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn geometries(&self) -> Vec<Geometry> {
        self.records.iter().map(|r| r.geometry).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Enables backbone dropout.
    pub training: bool,
    /// Floors the modulation factor `1 + gain` at zero.
    pub clamp_gains: bool,
}

/// A finished forward pass and the tape that holds its values.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub bundle: ActivationBundle,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn activation(&self, layer: usize) -> &Tensor {
        self.tape.value(self.bundle.records[layer].activation)
    }
}

fn glorot<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..=limit))
}

impl BackboneModel {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn build(config: ToyCnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng: ChaCha8Rng = seed::rng(seed, &[0xbac4]);
        let mut conv = Vec::new();
        let mut c_in = config.input_channels;
        for &c in &config.conv_channels {
            conv.push(ConvLayer {
                kernel: glorot(&[3, 3, c_in, c], 9 * c_in, 9 * c, &mut rng),
                bias: Tensor::zeros(&[c]),
            });
            c_in = c;
        }
        let dims = [
            (config.flatten_len(), config.dense_width),
            (config.dense_width, config.num_classes),
        ];
        let dense = dims
            .iter()
            .map(|&(i, o)| DenseLayer {
                weight: glorot(&[i, o], i, o, &mut rng),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        Ok(BackboneModel { config, conv, dense })
    }

    /// Assembles a model from parameter tensors in [`Self::tensors`] order.
    pub fn from_tensors(config: ToyCnnConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = Self::build(config.clone(), 0)?;
        if tensors.len() != reference.tensors().len() {
            return Err(Error::Format(format!(
                "backbone needs {} tensors, got {}",
                reference.tensors().len(),
                tensors.len()
            )));
        }
        for (t, r) in tensors.iter().zip(reference.tensors()) {
            if t.shape() != r.shape() {
                return Err(Error::Format(format!("tensor shape {:?}, expected {:?}", t.shape(), r.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next_pair = || (it.next().unwrap(), it.next().unwrap());
        let conv = (0..config.conv_channels.len())
            .map(|_| {
                let (kernel, bias) = next_pair();
                ConvLayer { kernel, bias }
            })
            .collect();
        let dense = (0..2)
            .map(|_| {
                let (weight, bias) = next_pair();
                DenseLayer { weight, bias }
            })
            .collect();
        Ok(BackboneModel { config, conv, dense })
    }

    pub fn config(&self) -> &ToyCnnConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Kernel/bias pairs layer by layer: conv stages, then dense layers.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.conv
            .iter()
            .flat_map(|l| [&l.kernel, &l.bias])
            .chain(self.dense.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.conv
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .chain(self.dense.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.conv.len() {
            names.push(format!("backbone.c{}.kernel", i + 1));
            names.push(format!("backbone.c{}.bias", i + 1));
        }
        for j in 0..self.dense.len() {
            names.push(format!("backbone.d{}.weight", j + 1));
            names.push(format!("backbone.d{}.bias", j + 1));
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn geometries(&self) -> Vec<Geometry> {
        self.config.geometries()
    }

    /// Records the parameters on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mut pair = |w: &Tensor, b: &Tensor| (tape.leaf(w.clone(), trainable), tape.leaf(b.clone(), trainable));
        BackboneVars {
            conv: self.conv.iter().map(|l| pair(&l.kernel, &l.bias)).collect(),
            dense: self.dense.iter().map(|l| pair(&l.weight, &l.bias)).collect(),
        }
    }

    /// Runs the network on `images` (`[b,32,32,3]`) already on the tape.
    ///
    /// `gains` is either empty (plain feed-forward) or holds one optional
    /// gain map per tapped layer; a layer's activation `a` becomes
    /// `a·(1+gain)` where a map is present. Dropout follows every pooling
    /// stage and `d1` when `opts.training` is set.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &BackboneVars,
        images: Var,
        gains: &[Option<Var>],
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<(Var, ActivationBundle)> {
        let geoms = self.geometries();
        let tags = self.config.layer_tags();
        if !gains.is_empty() && gains.len() != geoms.len() {
            return Err(Error::shape(
                "forward",
                format!("{} gain maps for {} layers", gains.len(), geoms.len()),
            ));
        }
        let s = tape.shape(images).to_vec();
        let side = self.config.image_size;
        if s.len() != 4 || s[1..] != [side, side, self.config.input_channels] {
            return Err(Error::shape("forward", format!("images {s:?}")));
        }
        let batch = s[0];
        let rate = self.config.dropout;

        let mut records = Vec::with_capacity(geoms.len());
        let mut tap = |tape: &mut Tape, layer: usize, act: Var| -> Result<Var> {
            let modulated = match gains.get(layer).copied().flatten() {
                Some(g) => {
                    let want = geoms[layer].gain_shape(batch);
                    if tape.shape(g) != want.as_slice() {
                        return Err(Error::shape(
                            "forward",
                            format!("gain for {} is {:?}, expected {want:?}", tags[layer], tape.shape(g)),
                        ));
                    }
                    tape.scale_add(act, g, opts.clamp_gains)?
                }
                None => act,
            };
            records.push(ActivationRecord {
                tag: tags[layer].clone(),
                geometry: geoms[layer],
                activation: modulated,
            });
            Ok(modulated)
        };

        let mut x = images;
        for (i, &(k, b)) in vars.conv.iter().enumerate() {
            let z = tape.conv2d(x, k, b)?;
            let a = tape.relu(z)?;
            let a = tap(tape, i, a)?;
            let p = tape.maxpool2x2(a)?;
            x = tape.dropout(p, rate, opts.training, rng)?;
        }
        let n_conv = vars.conv.len();
        let flat = tape.reshape(x, &[batch, self.config.flatten_len()])?;
        let (w1, b1) = vars.dense[0];
        let h = tape.linear(flat, w1, b1)?;
        let h = tape.relu(h)?;
        let h = tap(tape, n_conv, h)?;
        let h = tape.dropout(h, rate, opts.training, rng)?;
        let (w2, b2) = vars.dense[1];
        let logits = tape.linear(h, w2, b2)?;
        let logits = tap(tape, n_conv + 1, logits)?;
        Ok((logits, ActivationBundle { records }))
    }

    /// Convenience wrapper around [`Self::forward_on_tape`] on a fresh tape
    /// with constant parameters. Dropout draws from `seed`.
    pub fn forward(
        &self,
        images: &Tensor,
        gains: Option<&[Option<Tensor>]>,
        opts: ForwardOptions,
        seed: u64,
    ) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let gain_vars: Vec<Option<Var>> = gains
            .unwrap_or(&[])
            .iter()
            .map(|g| g.as_ref().map(|t| tape.constant(t.clone())))
            .collect();
        let mut rng = seed::rng(seed, &[0xf0d]);
        let (logits, bundle) = self.forward_on_tape(&mut tape, &vars, x, &gain_vars, opts, &mut rng)?;
        Ok(ForwardPass { tape, logits, bundle })
    }

    /// Marks the weights immutable for attention training.
    pub fn freeze(self) -> FrozenBackbone {
        FrozenBackbone(self)
    }
}

/// A backbone whose weights can no longer change.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone(BackboneModel);

impl FrozenBackbone {
    pub fn into_inner(self) -> BackboneModel {
        self.0
    }
}

impl std::ops::Deref for FrozenBackbone {
    type Target = BackboneModel;

    fn deref(&self) -> &BackboneModel {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainHyper {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            learning_rate: 0.001,
            batch_size: 128,
            patience: 50,
            max_epochs: 500,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Weights from the best validation epoch.
    pub model: BackboneModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f32,
}

/// Trains every backbone weight with Adam on cross-entropy, stopping once
/// validation accuracy has not improved for `patience` epochs and
/// restoring the best weights.
pub fn pretrain(
    mut model: BackboneModel,
    train: &ImageDataset,
    val: &ImageDataset,
    hyper: &PretrainHyper,
) -> Result<PretrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset("pretraining needs train and val images".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    let mut adam = Adam::new(hyper.learning_rate);
    let mut stopper = EarlyStopper::new(hyper.patience);
    let mut history = Vec::new();
    let eval_opts = EvalOptions::default();

    for epoch in 1..=hyper.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        data::shuffle(&mut order, &mut seed::rng(hyper.seed, &[0xe90c, epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let (mut images, labels) = train.batch(chunk);
            if hyper.augment {
                images = data::augment(&images, seed::derive(hyper.seed, &[0xa06, epoch as u64, bi as u64]))?;
            }
            let mut rng = seed::rng(hyper.seed, &[0xd0, epoch as u64, bi as u64]);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let x = tape.constant(images);
            let opts = ForwardOptions {
                training: true,
                clamp_gains: false,
            };
            let (logits, _) = model.forward_on_tape(&mut tape, &vars, x, &[], opts, &mut rng)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).data()[0] as f64 * labels.len() as f64;
            correct += training::count_correct(tape.value(logits), &labels);
            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<Tensor> = vars
                .all()
                .iter()
                .zip(model.tensors())
                .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
                .collect();
            adam.step(&mut model.tensors_mut(), &grad_tensors)?;
        }
        let val_acc = training::evaluate(&model, None, val, &eval_opts)?.accuracy;
        history.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / train.len() as f64) as f32,
            train_acc: correct as f32 / train.len() as f32,
            val_acc,
        });
        if stopper.observe(epoch, val_acc, || model.clone()) {
            break;
        }
    }
    let best_epoch = stopper.best_epoch();
    let best_val_acc = stopper.best_metric();
    let model = stopper.into_best().unwrap_or(model);
    Ok(PretrainOutcome {
        model,
        history,
        best_epoch,
        best_val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_closed_form() {
        assert_eq!(ToyCnnConfig::cifar10().param_count(), 620_362);
        assert_eq!(ToyCnnConfig::cifar100().param_count(), 643_492);
        let m = BackboneModel::build(ToyCnnConfig::cifar10(), 1).unwrap();
        assert_eq!(m.param_count(), 620_362);
        let m = BackboneModel::build(ToyCnnConfig::cifar100(), 1).unwrap();
        assert_eq!(m.param_count(), 643_492);
    }

    #[test]
    fn build_is_seeded() {
        let a = BackboneModel::build(ToyCnnConfig::cifar10(), 5).unwrap();
        let b = BackboneModel::build(ToyCnnConfig::cifar10(), 5).unwrap();
        let c = BackboneModel::build(ToyCnnConfig::cifar10(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.conv.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shape_trace() {
        let m = BackboneModel::build(ToyCnnConfig::cifar10(), 0).unwrap();
        let x = Tensor::full(&[1, 32, 32, 3], 0.5);
        let pass = m.forward(&x, None, ForwardOptions::default(), 0).unwrap();
        let shapes: Vec<Vec<usize>> = (0..5).map(|i| pass.activation(i).shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 32, 32, 32],
                vec![1, 16, 16, 64],
                vec![1, 8, 8, 128],
                vec![1, 256],
                vec![1, 10]
            ]
        );
        assert_eq!(ToyCnnConfig::cifar10().flatten_len(), 2048);
        let tags: Vec<&str> = pass.bundle.records.iter().map(|r| r.tag.as_str()).collect();
        assert_eq!(tags, ["c1", "c2", "c3", "d1", "d2"]);
    }

    #[test]
    fn zero_gains_are_bitwise_identity() {
        let m = BackboneModel::build(ToyCnnConfig::cifar10(), 2).unwrap();
        let x = Tensor::from_fn(&[2, 32, 32, 3], |i| ((i * 7919) % 255) as f32 / 255.0);
        let plain = m.forward(&x, None, ForwardOptions::default(), 0).unwrap();
        let gains: Vec<Option<Tensor>> = m.geometries().iter().map(|g| Some(Tensor::zeros(&g.gain_shape(2)))).collect();
        let gated = m.forward(&x, Some(&gains), ForwardOptions::default(), 0).unwrap();
        assert_eq!(plain.logits(), gated.logits());
    }

    #[test]
    fn minus_one_gain_silences_c1() {
        let m = BackboneModel::build(ToyCnnConfig::cifar10(), 3).unwrap();
        let x = Tensor::from_fn(&[1, 32, 32, 3], |i| ((i * 31) % 255) as f32 / 255.0);
        let mut gains: Vec<Option<Tensor>> = vec![None; 5];
        gains[0] = Some(Tensor::full(&[1, 32, 32], -1.0));
        let silenced = m.forward(&x, Some(&gains), ForwardOptions::default(), 0).unwrap();
        assert!(silenced.activation(0).data().iter().all(|&v| v == 0.0));

        // same as running the remaining layers on an all-zero c1 activation
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let zero = tape.constant(Tensor::zeros(&[1, 32, 32, 32]));
        let p = tape.maxpool2x2(zero).unwrap();
        let (k2, b2) = vars.conv[1];
        let z = tape.conv2d(p, k2, b2).unwrap();
        let a = tape.relu(z).unwrap();
        let p = tape.maxpool2x2(a).unwrap();
        let (k3, b3) = vars.conv[2];
        let z = tape.conv2d(p, k3, b3).unwrap();
        let a = tape.relu(z).unwrap();
        let p = tape.maxpool2x2(a).unwrap();
        let f = tape.reshape(p, &[1, 2048]).unwrap();
        let (w1, b1) = vars.dense[0];
        let h = tape.linear(f, w1, b1).unwrap();
        let h = tape.relu(h).unwrap();
        let (w2, bb2) = vars.dense[1];
        let logits = tape.linear(h, w2, bb2).unwrap();
        assert_eq!(tape.value(logits), silenced.logits());
    }

    #[test]
    fn gain_shape_mismatch_is_rejected() {
        let m = BackboneModel::build(ToyCnnConfig::cifar10(), 0).unwrap();
        let x = Tensor::zeros(&[1, 32, 32, 3]);
        let mut gains: Vec<Option<Tensor>> = vec![None; 5];
        gains[1] = Some(Tensor::zeros(&[1, 32, 32]));
        assert!(m.forward(&x, Some(&gains), ForwardOptions::default(), 0).is_err());
        assert!(m.forward(&x, Some(&[None, None]), ForwardOptions::default(), 0).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_training_dropout_is_seeded() {
        let m = BackboneModel::build(ToyCnnConfig::cifar10(), 4).unwrap();
        let x = Tensor::from_fn(&[2, 32, 32, 3], |i| (i % 13) as f32 / 13.0);
        let a = m.forward(&x, None, ForwardOptions::default(), 1).unwrap();
        let b = m.forward(&x, None, ForwardOptions::default(), 2).unwrap();
        assert_eq!(a.logits(), b.logits());
        let train = ForwardOptions {
            training: true,
            clamp_gains: false,
        };
        let c = m.forward(&x, None, train, 1).unwrap();
        let d = m.forward(&x, None, train, 1).unwrap();
        let e = m.forward(&x, None, train, 2).unwrap();
        assert_eq!(c.logits(), d.logits());
        assert_ne!(c.logits(), e.logits());
    }

    #[test]
    fn from_tensors_round_trip_and_rejects_bad_shapes() {
        let m = BackboneModel::build(ToyCnnConfig::cifar10(), 9).unwrap();
        let ts: Vec<Tensor> = m.tensors().into_iter().cloned().collect();
        let back = BackboneModel::from_tensors(ToyCnnConfig::cifar10(), ts.clone()).unwrap();
        assert_eq!(m, back);
        assert!(BackboneModel::from_tensors(ToyCnnConfig::cifar100(), ts).is_err());
    }
}
