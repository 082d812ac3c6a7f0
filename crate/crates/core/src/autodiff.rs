//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into every leaf marked as trainable. Nodes whose
//! inputs are all constants are never differentiated, so a frozen backbone
//! costs one forward pass plus the input-gradient path only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        // Only kept when the kernel needs a gradient.
        cols: Option<Vec<f32>>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    UnitProjection {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        units: usize,
        dim: usize,
    },
    Reshape {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<f32>,
    },
    ScaleAdd {
        input: Var,
        gain: Var,
        clamp: bool,
    },
    MeanAxes {
        input: Var,
        axes: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    ScaleBy {
        input: Var,
        factor: Var,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    DotLast {
        keys: Var,
        query: Var,
        batch: usize,
        inner: usize,
        dim: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// The gradient of `var`, or zeros of `shape` when `var` was unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn acc(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn column_sums(rows: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; cols];
    for row in rows.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Hash of every piecewise branch taken on the tape: ReLU input signs,
    /// max-pool winners and clamp states. Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.value(*input).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::ScaleAdd { gain, clamp: true, .. } => {
                    for &g in self.value(*gain).data() {
                        (1.0 + g > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 3×3, stride 1, zero-padded convolution: `[b,h,w,c_in] ⊛ [3,3,c_in,c_out] + [c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [b,h,w,c], got {xs:?}")));
        }
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 {
            return Err(Error::shape("conv2d", format!("kernel must be [3,3,c_in,c_out], got {ks:?}")));
        }
        if ks[2] != xs[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[3], ks[2]),
            ));
        }
        if bs != [ks[3]] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} for {} outputs", ks[3])));
        }
        let geom = ConvGeom {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            in_ch: xs[3],
            out_ch: ks[3],
        };
        let cols = tensor::im2col(self.value(input).data(), geom);
        let mut out = vec![0.0; geom.positions() * geom.out_ch];
        tensor::gemm(
            geom.positions(),
            geom.patch(),
            geom.out_ch,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            false,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(geom.out_ch) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let keep_cols = self.requires_grad(kernel);
        let value = Tensor::new(vec![xs[0], xs[1], xs[2], ks[3]], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols: keep_cols.then_some(cols),
            },
            &[input, kernel, bias],
        )
    }

    /// Non-overlapping 2×2 max pooling over `[b,h,w,c]`.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2x2", format!("input must be [b,h,w,c], got {s:?}")));
        }
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape(
                "maxpool2x2",
                format!("spatial size {}x{} is not even", s[1], s[2]),
            ));
        }
        let (out, argmax) = tensor::maxpool2x2(self.value(input).data(), s[0], s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2, s[3]], out)?;
        self.push("maxpool2x2", value, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    /// Affine map over the last axis: `x[..., n] · w[n, m] + b[m]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let in_dim = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != in_dim {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let out_dim = ws[1];
        if self.shape(bias) != [out_dim] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} for {out_dim} outputs", self.shape(bias)),
            ));
        }
        let rows = self.value(input).len() / in_dim.max(1);
        let mut out = vec![0.0; rows * out_dim];
        tensor::gemm(
            rows,
            in_dim,
            out_dim,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            false,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(out_dim.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(shape, out)?;
        self.push(
            "linear",
            value,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                in_dim,
                out_dim,
            },
            &[input, weight, bias],
        )
    }

    /// Per-unit projection of a dense activation: `y[b,c,m] = x[b,c]·w[c,m] + bias[m]`.
    pub fn unit_projection(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] {
            return Err(Error::shape("unit_projection", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (batch, units, dim) = (xs[0], xs[1], ws[1]);
        if self.shape(bias) != [dim] {
            return Err(Error::shape("unit_projection", format!("bias {:?}", self.shape(bias))));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(batch * units * dim);
        for b in 0..batch {
            for c in 0..units {
                let a = x[b * units + c];
                let row = &w[c * dim..(c + 1) * dim];
                out.extend(row.iter().zip(bv).map(|(wv, bias)| a * wv + bias));
            }
        }
        let value = Tensor::new(vec![batch, units, dim], out)?;
        self.push(
            "unit_projection",
            value,
            Op::UnitProjection {
                input,
                weight,
                bias,
                batch,
                units,
                dim,
            },
            &[input, weight, bias],
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { input }, &[input])
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1/(1-rate)`. Identity when `training` is off.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let x = self.value(input);
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { input, mask }, &[input])
    }

    /// Multiplicative modulation `x·(1+g)`, where `g`'s shape is a leading
    /// prefix of `x`'s and is broadcast over the remaining axes. With
    /// `clamp`, the factor is floored at zero.
    pub fn scale_add(&mut self, input: Var, gain: Var, clamp: bool) -> Result<Var> {
        let xs = self.shape(input);
        let gs = self.shape(gain);
        if gs.len() > xs.len() || xs[..gs.len()] != *gs {
            return Err(Error::shape("scale_add", format!("gain {gs:?} is not a prefix of {xs:?}")));
        }
        let x = self.value(input);
        let g = self.value(gain).data();
        let trailing = x.len() / g.len().max(1);
        let mut data = Vec::with_capacity(x.len());
        for (chunk, &gv) in x.data().chunks(trailing.max(1)).zip(g) {
            let mut factor = 1.0 + gv;
            if clamp {
                factor = factor.max(0.0);
            }
            data.extend(chunk.iter().map(|v| v * factor));
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale_add", value, Op::ScaleAdd { input, gain, clamp }, &[input, gain])
    }

    /// Mean over the given axes, which are removed from the shape. Reducing
    /// every axis yields shape `[1]`.
    pub fn mean_over_axes(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= xs.len()) {
            return Err(Error::shape("mean_over_axes", format!("axes {axes:?} for {xs:?}")));
        }
        let kept: Vec<usize> = (0..xs.len()).filter(|a| !axes.contains(a)).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&a| xs[a]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count: usize = axes.iter().map(|&a| xs[a]).product();
        let map = reduce_index_map(&xs, &axes);
        let mut out = vec![0.0f32; out_shape.iter().product()];
        for (v, &o) in self.value(input).data().iter().zip(&map) {
            out[o] += v;
        }
        let inv = 1.0 / count as f32;
        for o in &mut out {
            *o *= inv;
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("mean_over_axes", value, Op::MeanAxes { input, axes }, &[input])
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    /// Multiplies every element by the single value held in `factor`.
    pub fn scale_by(&mut self, input: Var, factor: Var) -> Result<Var> {
        if self.value(factor).len() != 1 {
            return Err(Error::shape("scale_by", format!("factor {:?} is not scalar", self.shape(factor))));
        }
        let f = self.value(factor).data()[0];
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * f).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale_by", value, Op::ScaleBy { input, factor }, &[input, factor])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(total as f32), Op::Sum { input }, &[input])
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.value(input).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        self.push("sum_squares", Tensor::scalar(total as f32), Op::SumSquares { input }, &[input])
    }

    /// Dot product along the last axis against one vector per batch item:
    /// `out[b, ...] = Σ_m keys[b, ..., m]·query[b, m]`.
    pub fn dot_last(&mut self, keys: Var, query: Var) -> Result<Var> {
        let ks = self.shape(keys).to_vec();
        let qs = self.shape(query).to_vec();
        if ks.len() < 2 || qs.len() != 2 || ks[0] != qs[0] || ks.last() != qs.last() {
            return Err(Error::shape("dot_last", format!("keys {ks:?} vs query {qs:?}")));
        }
        let (batch, dim) = (qs[0], qs[1]);
        let inner = self.value(keys).len() / (batch * dim).max(1);
        let k = self.value(keys).data();
        let q = self.value(query).data();
        let mut out = Vec::with_capacity(batch * inner);
        for b in 0..batch {
            let qb = &q[b * dim..(b + 1) * dim];
            for i in 0..inner {
                let kb = &k[(b * inner + i) * dim..(b * inner + i + 1) * dim];
                out.push(kb.iter().zip(qb).map(|(x, y)| x * y).sum::<f32>());
            }
        }
        let value = Tensor::new(ks[..ks.len() - 1].to_vec(), out)?;
        self.push(
            "dot_last",
            value,
            Op::DotLast {
                keys,
                query,
                batch,
                inner,
                dim,
            },
            &[keys, query],
        )
    }

    /// Mean cross-entropy of `softmax(logits[b, n])` against integer labels.
    /// Each row is shifted by its maximum before exponentiation.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {classes} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            loss += lse - (row[label] - max) as f64;
            tensor::softmax_in_place(row);
        }
        let n = labels.len().max(1) as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar((loss / n) as f32),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss {:?} is not scalar", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if !dy.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), dy)?);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let g = *geom;
                    if rg(*bias) {
                        acc(&mut grads[bias.0], column_sums(&dy, g.out_ch));
                    }
                    if rg(*kernel) {
                        let cols = cols.as_ref().expect("conv cols kept for trainable kernel");
                        let mut dk = vec![0.0; g.patch() * g.out_ch];
                        tensor::gemm(g.patch(), g.positions(), g.out_ch, cols, true, &dy, false, &mut dk, false);
                        acc(&mut grads[kernel.0], dk);
                    }
                    if rg(*input) {
                        let mut dcols = vec![0.0; g.positions() * g.patch()];
                        tensor::gemm(
                            g.positions(),
                            g.out_ch,
                            g.patch(),
                            &dy,
                            false,
                            self.value(*kernel).data(),
                            true,
                            &mut dcols,
                            false,
                        );
                        acc(&mut grads[input.0], tensor::col2im(&dcols, g));
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if rg(*input) {
                        let mut dx = vec![0.0; self.value(*input).len()];
                        for (&src, d) in argmax.iter().zip(&dy) {
                            dx[src as usize] += d;
                        }
                        acc(&mut grads[input.0], dx);
                    }
                }
                Op::Relu { input } => {
                    if rg(*input) {
                        let x = self.value(*input).data();
                        let dx = x.iter().zip(&dy).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                        acc(&mut grads[input.0], dx);
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    rows,
                    in_dim,
                    out_dim,
                } => {
                    let (rows, in_dim, out_dim) = (*rows, *in_dim, *out_dim);
                    if rg(*bias) {
                        acc(&mut grads[bias.0], column_sums(&dy, out_dim));
                    }
                    if rg(*weight) {
                        let mut dw = vec![0.0; in_dim * out_dim];
                        tensor::gemm(in_dim, rows, out_dim, self.value(*input).data(), true, &dy, false, &mut dw, false);
                        acc(&mut grads[weight.0], dw);
                    }
                    if rg(*input) {
                        let mut dx = vec![0.0; rows * in_dim];
                        tensor::gemm(rows, out_dim, in_dim, &dy, false, self.value(*weight).data(), true, &mut dx, false);
                        acc(&mut grads[input.0], dx);
                    }
                }
                Op::UnitProjection {
                    input,
                    weight,
                    bias,
                    batch,
                    units,
                    dim,
                } => {
                    let (batch, units, dim) = (*batch, *units, *dim);
                    let x = self.value(*input).data();
                    let w = self.value(*weight).data();
                    if rg(*bias) {
                        acc(&mut grads[bias.0], column_sums(&dy, dim));
                    }
                    if rg(*weight) {
                        let mut dw = vec![0.0; units * dim];
                        for b in 0..batch {
                            for c in 0..units {
                                let a = x[b * units + c];
                                let row = &dy[(b * units + c) * dim..(b * units + c + 1) * dim];
                                for (o, d) in dw[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                                    *o += a * d;
                                }
                            }
                        }
                        acc(&mut grads[weight.0], dw);
                    }
                    if rg(*input) {
                        let mut dx = vec![0.0; batch * units];
                        for b in 0..batch {
                            for c in 0..units {
                                let row = &dy[(b * units + c) * dim..(b * units + c + 1) * dim];
                                dx[b * units + c] =
                                    row.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(d, wv)| d * wv).sum();
                            }
                        }
                        acc(&mut grads[input.0], dx);
                    }
                }
                Op::Reshape { input } => {
                    if rg(*input) {
                        acc(&mut grads[input.0], dy);
                    }
                }
                Op::Dropout { input, mask } => {
                    if rg(*input) {
                        acc(&mut grads[input.0], dy.iter().zip(mask).map(|(d, m)| d * m).collect());
                    }
                }
                Op::ScaleAdd { input, gain, clamp } => {
                    let x = self.value(*input).data();
                    let g = self.value(*gain).data();
                    let trailing = x.len() / g.len().max(1);
                    if rg(*gain) {
                        let dg = g
                            .iter()
                            .enumerate()
                            .map(|(j, &gv)| {
                                if *clamp && 1.0 + gv < 0.0 {
                                    return 0.0;
                                }
                                let span = j * trailing..(j + 1) * trailing;
                                x[span.clone()].iter().zip(&dy[span]).map(|(a, d)| a * d).sum()
                            })
                            .collect();
                        acc(&mut grads[gain.0], dg);
                    }
                    if rg(*input) {
                        let mut dx = Vec::with_capacity(x.len());
                        for (chunk, &gv) in dy.chunks(trailing.max(1)).zip(g) {
                            let mut factor = 1.0 + gv;
                            if *clamp {
                                factor = factor.max(0.0);
                            }
                            dx.extend(chunk.iter().map(|d| d * factor));
                        }
                        acc(&mut grads[input.0], dx);
                    }
                }
                Op::MeanAxes { input, axes } => {
                    if rg(*input) {
                        let xs = self.shape(*input);
                        let count: usize = axes.iter().map(|&a| xs[a]).product();
                        let inv = 1.0 / count as f32;
                        let map = reduce_index_map(xs, axes);
                        acc(&mut grads[input.0], map.iter().map(|&o| dy[o] * inv).collect());
                    }
                }
                Op::Add { a, b } => {
                    if rg(*a) {
                        acc(&mut grads[a.0], dy.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads[b.0], dy);
                    }
                }
                Op::Sub { a, b } => {
                    if rg(*a) {
                        acc(&mut grads[a.0], dy.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads[b.0], dy.iter().map(|d| -d).collect());
                    }
                }
                Op::Mul { a, b } => {
                    if rg(*a) {
                        let y = self.value(*b).data();
                        acc(&mut grads[a.0], dy.iter().zip(y).map(|(d, v)| d * v).collect());
                    }
                    if rg(*b) {
                        let x = self.value(*a).data();
                        acc(&mut grads[b.0], dy.iter().zip(x).map(|(d, v)| d * v).collect());
                    }
                }
                Op::Scale { input, factor } => {
                    if rg(*input) {
                        acc(&mut grads[input.0], dy.iter().map(|d| d * factor).collect());
                    }
                }
                Op::ScaleBy { input, factor } => {
                    let f = self.value(*factor).data()[0];
                    if rg(*factor) {
                        let x = self.value(*input).data();
                        let df: f64 = x.iter().zip(&dy).map(|(a, d)| (*a as f64) * (*d as f64)).sum();
                        acc(&mut grads[factor.0], vec![df as f32]);
                    }
                    if rg(*input) {
                        acc(&mut grads[input.0], dy.iter().map(|d| d * f).collect());
                    }
                }
                Op::Sum { input } => {
                    if rg(*input) {
                        acc(&mut grads[input.0], vec![dy[0]; self.value(*input).len()]);
                    }
                }
                Op::SumSquares { input } => {
                    if rg(*input) {
                        let x = self.value(*input).data();
                        acc(&mut grads[input.0], x.iter().map(|v| 2.0 * v * dy[0]).collect());
                    }
                }
                Op::DotLast {
                    keys,
                    query,
                    batch,
                    inner,
                    dim,
                } => {
                    let (batch, inner, dim) = (*batch, *inner, *dim);
                    let k = self.value(*keys).data();
                    let q = self.value(*query).data();
                    if rg(*keys) {
                        let mut dk = Vec::with_capacity(k.len());
                        for b in 0..batch {
                            let qb = &q[b * dim..(b + 1) * dim];
                            for i in 0..inner {
                                let d = dy[b * inner + i];
                                dk.extend(qb.iter().map(|v| v * d));
                            }
                        }
                        acc(&mut grads[keys.0], dk);
                    }
                    if rg(*query) {
                        let mut dq = vec![0.0; batch * dim];
                        for b in 0..batch {
                            let out = &mut dq[b * dim..(b + 1) * dim];
                            for i in 0..inner {
                                let d = dy[b * inner + i];
                                let kb = &k[(b * inner + i) * dim..(b * inner + i + 1) * dim];
                                for (o, kv) in out.iter_mut().zip(kb) {
                                    *o += d * kv;
                                }
                            }
                        }
                        acc(&mut grads[query.0], dq);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    if rg(*logits) {
                        let classes = probs.len() / labels.len().max(1);
                        let scale = dy[0] / labels.len() as f32;
                        let mut dx = probs.clone();
                        for (row, &label) in dx.chunks_mut(classes).zip(labels) {
                            row[label] -= 1.0;
                            for v in row.iter_mut() {
                                *v *= scale;
                            }
                        }
                        acc(&mut grads[logits.0], dx);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// For every flat index of a tensor with shape `shape`, the flat index it
/// lands on once `axes` (sorted) are summed out.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for a in (0..shape.len()).rev() {
        if !axes.contains(&a) {
            out_strides[a] = stride;
            stride *= shape[a];
        }
    }
    let mut idx = vec![0usize; shape.len()];
    let mut map = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            cur += out_strides[a];
            if idx[a] < shape[a] {
                break;
            }
            cur -= out_strides[a] * shape[a];
            idx[a] = 0;
        }
    }
    map
}
