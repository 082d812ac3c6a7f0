//! Shared fixtures: randomized gradient cases and naive reference
//! implementations of the attention equations.
#![allow(dead_code)]

pub mod reference;

use gattanet::attention::{run, run_on_tape, RunOptions};
use gattanet::backbone::{BackboneVars, ForwardOptions};
use gattanet::attention::LesionMask;
use gattanet::gradcheck::{grad_check, GradCheck, SCALE_FLOOR};
use gattanet::{AttentionParams, BackboneModel, Result, Tape, Tensor, ToyCnnConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f32 = 1e-2;
pub const GRAD_EPS: f32 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so kinks at 0 are never within a
/// finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Scalar readout `Σ w⊙y` with fixed random weights.
pub fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(&mut r, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Largest share of elements a case may leave out for sitting on a
/// piecewise boundary.
pub const MAX_STRADDLING: f32 = 0.05;

pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f32,
    pub straddling_fraction: f32,
    pub report: GradCheck,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE && self.straddling_fraction <= MAX_STRADDLING
    }
}

type Case = fn(u64) -> Result<CaseResult>;

fn check<F>(name: &'static str, seed: u64, params: &[Tensor], f: F) -> Result<CaseResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eps = GRAD_EPS;
    let report = grad_check(f, params, eps)?;
    Ok(CaseResult {
        name,
        seed,
        max_rel_error: report.max_rel_error,
        straddling_fraction: report.straddling_fraction(),
        report,
    })
}

fn conv2d(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 4, 4, 2], -1.0, 1.0);
    let k = uniform(&mut r, &[3, 3, 2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[3], -1.0, 1.0);
    check("conv2d", seed, &[x, k, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2])?;
        readout(t, y, seed)
    })
}

fn maxpool(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    // distinct values spaced well beyond the step, so no argmax ties flip
    let mut vals: Vec<f32> = (0..2 * 4 * 4 * 3).map(|i| i as f32 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(vec![2, 4, 4, 3], vals)?;
    check("maxpool2x2", seed, &[x], |t, v| {
        let y = t.maxpool2x2(v[0])?;
        readout(t, y, seed)
    })
}

fn relu(seed: u64) -> Result<CaseResult> {
    let x = away_from_zero(&mut rng(seed), &[3, 5]);
    check("relu", seed, &[x], |t, v| {
        let y = t.relu(v[0])?;
        readout(t, y, seed)
    })
}

fn linear(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let b = uniform(&mut r, &[5], -1.0, 1.0);
    check("linear", seed, &[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        readout(t, y, seed)
    })
}

fn unit_projection(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[5, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[3], -1.0, 1.0);
    check("unit_projection", seed, &[x, w, b], |t, v| {
        let y = t.unit_projection(v[0], v[1], v[2])?;
        readout(t, y, seed)
    })
}

fn reshape(seed: u64) -> Result<CaseResult> {
    let x = uniform(&mut rng(seed), &[2, 3, 4], -1.0, 1.0);
    check("reshape", seed, &[x], |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        readout(t, y, seed)
    })
}

fn dropout(seed: u64) -> Result<CaseResult> {
    let x = uniform(&mut rng(seed), &[4, 6], -1.0, 1.0);
    check("dropout", seed, &[x], |t, v| {
        // same mask on every evaluation
        let y = t.dropout(v[0], 0.25, true, &mut rng(seed ^ 0xd5))?;
        readout(t, y, seed)
    })
}

fn scale_add(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0);
    let g = uniform(&mut r, &[2, 3, 3], -0.5, 0.5);
    check("scale_add", seed, &[x, g], |t, v| {
        let y = t.scale_add(v[0], v[1], false)?;
        readout(t, y, seed)
    })
}

fn scale_add_clamped(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 4, 3], -1.0, 1.0);
    // gains keep 1+g at least 0.1 away from the clamp point
    let g = Tensor::from_fn(&[2, 4], |_| {
        if r.random_bool(0.5) { r.random_range(-0.9..0.5) } else { r.random_range(-3.0..-1.1) }
    });
    check("scale_add_clamped", seed, &[x, g], |t, v| {
        let y = t.scale_add(v[0], v[1], true)?;
        readout(t, y, seed)
    })
}

fn mean_over_axes(seed: u64) -> Result<CaseResult> {
    let x = uniform(&mut rng(seed), &[2, 3, 4, 5], -1.0, 1.0);
    check("mean_over_axes", seed, &[x], |t, v| {
        let y = t.mean_over_axes(v[0], &[1, 2])?;
        readout(t, y, seed)
    })
}

fn elementwise(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let c = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check("add_sub_mul_scale", seed, &[a, b, c], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[2])?;
        let m = t.mul(d, v[1])?;
        let y = t.scale(m, -1.7)?;
        readout(t, y, seed)
    })
}

fn scale_by(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let a = uniform(&mut r, &[1], -1.0, 1.0);
    check("scale_by", seed, &[x, a], |t, v| {
        let y = t.scale_by(v[0], v[1])?;
        readout(t, y, seed)
    })
}

fn sums(seed: u64) -> Result<CaseResult> {
    let x = uniform(&mut rng(seed), &[4, 3], -1.0, 1.0);
    check("sum_sum_squares", seed, &[x], |t, v| {
        let a = t.sum_squares(v[0])?;
        let w = readout(t, v[0], seed)?;
        let b = t.mul(w, w)?;
        let s = t.add(a, b)?;
        t.sum(s)
    })
}

fn dot_last(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let k = uniform(&mut r, &[2, 3, 3, 4], -1.0, 1.0);
    let q = uniform(&mut r, &[2, 4], -1.0, 1.0);
    check("dot_last", seed, &[k, q], |t, v| {
        let y = t.dot_last(v[0], v[1])?;
        readout(t, y, seed)
    })
}

fn cross_entropy(seed: u64) -> Result<CaseResult> {
    let mut r = rng(seed);
    let z = uniform(&mut r, &[4, 5], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    check("softmax_cross_entropy", seed, &[z], move |t, v| t.softmax_cross_entropy(v[0], &labels))
}

fn random_backbone(config: &ToyCnnConfig, seed: u64, r: &mut ChaCha8Rng) -> Result<BackboneModel> {
    let mut backbone = BackboneModel::build(config.clone(), seed)?;
    // nonzero biases move ReLU kinks off the origin
    for t in backbone.tensors_mut().into_iter().filter(|t| t.rank() == 1) {
        *t = uniform(r, t.shape(), -0.2, 0.2);
    }
    Ok(backbone)
}

fn all_layers_alive(backbone: &BackboneModel, images: &Tensor) -> Result<bool> {
    let pass = backbone.forward(images, None, ForwardOptions::default(), 0)?;
    let batch = images.shape()[0];
    // every tap except the logits follows a ReLU
    Ok((0..backbone.config().geometries().len() - 1).all(|layer| {
        let a = pass.activation(layer).data();
        a.chunks(a.len() / batch).all(|item| item.iter().any(|&v| v > 0.0))
    }))
}

/// Four-layer-deep network at 8×8 resolution with O(1) attention scales.
pub fn tiny_model(seed: u64) -> Result<(BackboneModel, AttentionParams, Tensor, Vec<usize>)> {
    let config = ToyCnnConfig {
        image_size: 8,
        conv_channels: vec![3, 4, 4],
        dense_width: 5,
        ..ToyCnnConfig::with_classes(3)
    };
    let mut r = rng(seed ^ 0xc);
    let images = uniform(&mut r, &[2, 8, 8, 3], 0.0, 1.0);
    // Redraw until every tapped layer is alive for every image; a dead layer
    // cuts the path to the logits and leaves nothing to compare.
    let mut backbone = random_backbone(&config, seed, &mut r)?;
    while !all_layers_alive(&backbone, &images)? {
        backbone = random_backbone(&config, r.random(), &mut r)?;
    }
    let mut params = AttentionParams::for_backbone(&backbone, 4, seed ^ 0xa)?;
    let mut r = rng(seed ^ 0xb);
    for layer in &mut params.layers {
        for t in [&mut layer.key_bias, &mut layer.query_bias] {
            *t = uniform(&mut r, t.shape(), -0.5, 0.5);
        }
        layer.alpha = Tensor::scalar(r.random_range(-0.3..0.3));
    }
    // Rescale the readout so logits spread about ±1.5, keeping the loss away
    // from both the flat near-uniform regime and softmax saturation.
    let logits = backbone.forward(&images, None, ForwardOptions::default(), 0)?.logits().clone();
    let n = logits.len() as f32;
    let mean = logits.data().iter().sum::<f32>() / n;
    let spread = (logits.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt();
    let k = 1.5 / spread.max(1e-3);
    let mut tensors = backbone.tensors_mut();
    for t in tensors.iter_mut().rev().take(2) {
        for v in t.data_mut() {
            *v *= k;
        }
    }
    let labels = vec![r.random_range(0..3), r.random_range(0..3)];
    Ok((backbone, params, images, labels))
}

/// Compares tape gradients of `params` against f64 central differences of
/// the reference loss `f`, using the same error measure as `grad_check`.
fn against_reference<F>(name: &'static str, seed: u64, params: &[Tensor], analytic: &[Tensor], f: F) -> CaseResult
where
    F: Fn(&[Vec<f64>]) -> (f64, reference::Branches),
{
    let wide: Vec<Vec<f64>> = params.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let numeric = reference::numeric_gradient(f, &wide);
    let scale = analytic.iter().flat_map(|g| g.data()).fold(0.0f32, |m, v| m.max(v.abs()));
    let floor = (SCALE_FLOOR * scale).max(f32::MIN_POSITIVE);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        straddling: 0,
    };
    for (pi, (g, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (ei, (&a, n)) in g.data().iter().zip(n).enumerate() {
            let Some(n) = n.map(|n| n as f32) else {
                report.straddling += 1;
                continue;
            };
            report.checked += 1;
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    CaseResult {
        name,
        seed,
        max_rel_error: report.max_rel_error,
        straddling_fraction: report.straddling_fraction(),
        report,
    }
}

fn backbone_loss(seed: u64) -> Result<CaseResult> {
    let (backbone, _, images, labels) = tiny_model(seed)?;
    let params: Vec<Tensor> = backbone.tensors().into_iter().cloned().collect();
    let mut tape = Tape::new();
    let handles: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let bvars = BackboneVars::from_handles(backbone.config(), &handles)?;
    let x = tape.constant(images.clone());
    let (logits, _) = backbone.forward_on_tape(&mut tape, &bvars, x, &[], ForwardOptions::default(), &mut rng(0))?;
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = handles.iter().zip(&params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();

    let cfg = backbone.config().clone();
    let imgs = reference::images(&images);
    Ok(against_reference("backbone_loss", seed, &params, &analytic, |p| {
        let net = reference::RefNet::new(cfg.image_size, cfg.input_channels, &cfg.conv_channels, p);
        let mut branches = Vec::new();
        let logits: Vec<Vec<f64>> = imgs.iter().map(|im| net.forward(im, &[], false, &mut branches).0).collect();
        (reference::cross_entropy(&logits, &labels), branches)
    }))
}

/// Attention-path loss through `iterations` passes with the given lesion
/// and clamp settings, differentiated with respect to every attention
/// parameter.
fn attention_case(name: &'static str, seed: u64, iterations: usize, lesion: &str, clamp: bool) -> Result<CaseResult> {
    let (backbone, params, images, labels) = tiny_model(seed)?;
    let mask: LesionMask = lesion.parse()?;
    let opts = RunOptions {
        iterations,
        lesion: Some(mask.clone()),
        clamp_gains: clamp,
        ..RunOptions::default()
    };
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut tape = Tape::new();
    let pvars = params.bind(&mut tape, true);
    let bvars = backbone.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let trace = run_on_tape(&mut tape, &backbone, &bvars, &pvars, x, &opts, &mut rng(0))?;
    let loss = tape.softmax_cross_entropy(trace.logits, &labels)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = pvars.all().iter().zip(&tensors).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();

    let net = reference::RefNet::from_model(&backbone);
    let modulated: Vec<bool> = (0..mask.len()).map(|i| mask.modulates(i)).collect();
    let imgs = reference::images(&images);
    let dim = params.dim();
    Ok(against_reference(name, seed, &tensors, &analytic, |p| {
        let att = reference::RefAttention::new(dim, p);
        let mut branches = Vec::new();
        let logits: Vec<Vec<f64>> = imgs
            .iter()
            .map(|im| reference::run(&net, &att, im, iterations, &modulated, clamp, &mut branches).0)
            .collect();
        (reference::cross_entropy(&logits, &labels), branches)
    }))
}

fn attention_loss(seed: u64) -> Result<CaseResult> {
    attention_case("attention_path_loss", seed, 1, "cccdd", false)
}

fn attention_two_iterations(seed: u64) -> Result<CaseResult> {
    attention_case("attention_path_loss_2_iterations", seed, 2, "cccdd", false)
}

fn attention_lesioned_clamped(seed: u64) -> Result<CaseResult> {
    attention_case("attention_path_loss_lesioned_clamped", seed, 2, "c.cd.", true)
}

pub const GRADIENT_CASES: [Case; 19] = [
    conv2d,
    maxpool,
    relu,
    linear,
    unit_projection,
    reshape,
    dropout,
    scale_add,
    scale_add_clamped,
    mean_over_axes,
    elementwise,
    scale_by,
    sums,
    dot_last,
    cross_entropy,
    attention_loss,
    backbone_loss,
    attention_two_iterations,
    attention_lesioned_clamped,
];

/// Runs every gradient case for seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in GRADIENT_CASES {
        for seed in 0..seeds {
            out.push(case(seed)?);
        }
    }
    Ok(out)
}

/// A random small architecture with random weights, attention parameters,
/// images and run settings.
pub struct OracleCase {
    pub backbone: BackboneModel,
    pub params: AttentionParams,
    pub images: Tensor,
    pub opts: RunOptions,
}

pub fn oracle_case(seed: u64) -> Result<OracleCase> {
    let mut r = rng(seed ^ 0x0ac1e);
    let n_conv = r.random_range(1..=3);
    let config = ToyCnnConfig {
        image_size: (1 << n_conv) * r.random_range(1..=3),
        input_channels: r.random_range(1..=3),
        conv_channels: (0..n_conv).map(|_| r.random_range(1..=5)).collect(),
        dense_width: r.random_range(1..=6),
        num_classes: r.random_range(2..=5),
        dropout: 0.0,
    };
    let backbone = random_backbone(&config, r.random(), &mut r)?;
    let dim = r.random_range(1..=6);
    let mut params = AttentionParams::for_backbone(&backbone, dim, r.random())?;
    for layer in &mut params.layers {
        for t in [&mut layer.key_bias, &mut layer.query_bias] {
            *t = uniform(&mut r, t.shape(), -0.5, 0.5);
        }
        // trained gain scales stay within about ±0.25
        layer.alpha = Tensor::scalar(r.random_range(-0.25..0.25));
    }
    let batch = r.random_range(1..=3);
    let s = config.image_size;
    let images = uniform(&mut r, &[batch, s, s, config.input_channels], 0.0, 1.0);
    let layers = config.geometries().len();
    let mask: String = (0..layers)
        .map(|i| match (r.random_bool(0.7), i < n_conv) {
            (false, _) => '.',
            (true, true) => 'c',
            (true, false) => 'd',
        })
        .collect();
    let opts = RunOptions {
        iterations: r.random_range(1..=3),
        lesion: Some(mask.parse()?),
        clamp_gains: r.random_bool(0.5),
        ..RunOptions::default()
    };
    Ok(OracleCase {
        backbone,
        params,
        images,
        opts,
    })
}

/// Largest absolute difference between the library and the f64 reference
/// over every pass's keys, queries, global query and agreement maps, and
/// the final logits.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleDeviation {
    pub keys_queries: f64,
    pub global_query: f64,
    pub gatta: f64,
    pub logits: f64,
}

impl OracleDeviation {
    pub fn max(&self) -> f64 {
        self.keys_queries.max(self.global_query).max(self.gatta).max(self.logits)
    }
}

fn max_abs_diff(lib: &[f32], reference: impl IntoIterator<Item = f64>) -> f64 {
    let reference: Vec<f64> = reference.into_iter().collect();
    assert_eq!(lib.len(), reference.len(), "oracle layout mismatch");
    lib.iter().zip(&reference).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max)
}

pub fn oracle_deviation(case: &OracleCase) -> Result<OracleDeviation> {
    let out = run(&case.backbone, &case.params, &case.images, &case.opts)?;
    let net = reference::RefNet::from_model(&case.backbone);
    let att = reference::RefAttention::from_params(&case.params);
    let mask = case.opts.lesion.clone().unwrap_or_else(|| LesionMask::full(&case.backbone.geometries()));
    let modulated: Vec<bool> = (0..mask.len()).map(|i| mask.modulates(i)).collect();
    let per_image: Vec<_> = reference::images(&case.images)
        .iter()
        .map(|im| reference::run(&net, &att, im, case.opts.iterations, &modulated, case.opts.clamp_gains, &mut Vec::new()))
        .collect();

    let mut dev = OracleDeviation::default();
    dev.logits = max_abs_diff(out.logits.data(), per_image.iter().flat_map(|(z, _)| z.clone()));
    for (pass, state) in out.states.iter().enumerate() {
        let refs: Vec<&reference::RefState> = per_image.iter().map(|(_, s)| &s[pass]).collect();
        dev.global_query = dev
            .global_query
            .max(max_abs_diff(state.global_query.data(), refs.iter().flat_map(|s| s.global_query.clone())));
        for l in 0..state.keys.len() {
            let flat = |rows: &Vec<Vec<f64>>| rows.iter().flatten().copied().collect::<Vec<_>>();
            let k = max_abs_diff(state.keys[l].data(), refs.iter().flat_map(|s| flat(&s.keys[l])));
            let q = max_abs_diff(state.queries[l].data(), refs.iter().flat_map(|s| flat(&s.queries[l])));
            let g = max_abs_diff(state.gatta[l].data(), refs.iter().flat_map(|s| s.gatta[l].clone()));
            dev.keys_queries = dev.keys_queries.max(k).max(q);
            dev.gatta = dev.gatta.max(g);
        }
    }
    Ok(dev)
}
