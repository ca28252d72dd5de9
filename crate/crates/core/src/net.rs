//! Feed-forward backbone with a linear prediction head and hand-written backprop.
//!
//! Every backbone layer computes `a = relu(W^T a_prev + b)` with `W` stored
//! `in x out`; the head computes logits `u = W^T z + b` with `W` stored `m x c`,
//! so column `j` of the head weight holds the parameters of class `j`.
//!
//! Flattened parameter order is backbone layers first (weight row-major, then
//! bias), head last (weight row-major, then bias). The head segment, of length
//! `m * c + c`, is the gradient space used for trajectory statistics.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::taxdata::Domain;

/// Clamp used for `log p` in cross-entropy and for Dice denominators.
pub const PROB_EPS: f64 = 1e-12;
const DISTRIBUTION_TOL: f64 = 1e-9;

pub const CHECKPOINT_MAGIC: &str = "trajdistill-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `in x out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    fn inputs(&self) -> usize {
        self.weight.rows()
    }

    fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn len(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.as_slice().iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }

    /// `W^T a + b`
    fn affine(&self, a: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (k, &ak) in a.iter().enumerate() {
            if ak != 0.0 {
                axpy(ak, self.weight.row(k), &mut out);
            }
        }
        out
    }
}

/// Parameters of the backbone `F` and head `C`. Also used as the container for
/// gradients, which share the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Layer>,
    pub head: Layer,
}

impl ModelParams {
    /// `widths = [input, hidden.., classes]`; at least input and classes.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "layer widths must have length >= 2 and be positive, got {widths:?}"
            )));
        }
        let n = widths.len();
        let backbone = widths[..n - 1]
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        let head = Layer::zeros(widths[n - 2], widths[n - 1]);
        Ok(Self { backbone, head })
    }

    /// He-normal backbone weights, `N(0, 1/m)` head weights, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(widths)?;
        for layer in &mut params.backbone {
            let std = (2.0 / layer.inputs() as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            for w in layer.weight.as_mut_slice() {
                *w = dist.sample(&mut *rng);
            }
        }
        let std = (1.0 / params.head.inputs() as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        for w in params.head.weight.as_mut_slice() {
            *w = dist.sample(&mut *rng);
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.widths()).expect("widths of a valid model")
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.backbone.iter().map(Layer::inputs).collect();
        w.push(self.head.inputs());
        w.push(self.head.outputs());
        w
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.first().unwrap_or(&self.head).inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.inputs()
    }

    pub fn n_classes(&self) -> usize {
        self.head.outputs()
    }

    /// Dimension `w` of the head-gradient space: `m * c + c`.
    pub fn head_dim(&self) -> usize {
        self.head.len()
    }

    pub fn n_params(&self) -> usize {
        self.backbone.iter().map(Layer::len).sum::<usize>() + self.head.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn head_flat(&self) -> Vec<f64> {
        self.head.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_len("ModelParams::set_flat", self.n_params(), flat.len())?;
        ensure_finite("ModelParams::set_flat", flat)?;
        for (p, v) in self.values_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    pub fn set_head_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_len("ModelParams::set_head_flat", self.head_dim(), flat.len())?;
        ensure_finite("ModelParams::set_head_flat", flat)?;
        for (p, v) in self.head.values_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.backbone
            .iter()
            .flat_map(Layer::values)
            .chain(self.head.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone
            .iter_mut()
            .flat_map(Layer::values_mut)
            .chain(self.head.values_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.values_mut() {
            *a *= alpha;
        }
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.widths() == other.widths()
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activation of every backbone layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// Post-activation of every backbone layer; the last one is `z`.
    pub activations: Vec<Vec<f64>>,
    /// Head input `z` (length `m`).
    pub features: Vec<f64>,
    /// `u` (length `c`).
    pub logits: Vec<f64>,
    /// `softmax(u)`.
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|u| (u - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    ensure_len("forward", params.input_dim(), x.len())?;
    ensure_finite("forward input", x)?;
    let mut pre_activations = Vec::with_capacity(params.backbone.len());
    let mut activations = Vec::with_capacity(params.backbone.len());
    let mut a = x.to_vec();
    for layer in &params.backbone {
        let h = layer.affine(&a);
        a = h.iter().copied().map(relu).collect();
        pre_activations.push(h);
        activations.push(a.clone());
    }
    let logits = params.head.affine(&a);
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        input: x.to_vec(),
        pre_activations,
        activations,
        features: a,
        logits,
        probs,
    })
}

/// Index of the largest probability; ties go to the lowest class id.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, n_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; n_classes];
    y[class] = 1.0;
    y
}

fn check_distribution(what: &'static str, v: &[f64]) -> Result<()> {
    ensure_finite(what, v)?;
    let total: f64 = v.iter().sum();
    if v.iter().any(|x| *x < 0.0) || (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidInput(format!(
            "{what} must be a probability vector (sum {total})"
        )));
    }
    Ok(())
}

/// `-sum_i y_i log p_i`, with `p_i` clamped below at [`PROB_EPS`].
pub fn ce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    ensure_len("ce_loss", p.len(), y.len())?;
    check_distribution("ce_loss probabilities", p)?;
    check_distribution("ce_loss labels", y)?;
    Ok(p.iter()
        .zip(y)
        .filter(|(_, &yi)| yi > 0.0)
        .map(|(&pi, &yi)| -yi * pi.max(PROB_EPS).ln())
        .sum())
}

/// `sum_i (1 - 2 y_i p_i / (y_i + p_i))`, denominators clamped at [`PROB_EPS`].
pub fn dice_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    ensure_len("dice_loss", p.len(), y.len())?;
    check_distribution("dice_loss probabilities", p)?;
    check_distribution("dice_loss labels", y)?;
    Ok(p.iter()
        .zip(y)
        .map(|(&pi, &yi)| 1.0 - 2.0 * yi * pi / (yi + pi).max(PROB_EPS))
        .sum())
}

pub fn loss(kind: LossKind, p: &[f64], y: &[f64]) -> Result<f64> {
    match kind {
        LossKind::CrossEntropy => ce_loss(p, y),
        LossKind::Dice => dice_loss(p, y),
    }
}

/// Vector-Jacobian product of softmax: maps `dL/dp` to `dL/du`.
pub fn softmax_vjp(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

/// `dL/du` for the given loss at the traced probabilities.
pub fn logit_gradient(kind: LossKind, p: &[f64], y: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::CrossEntropy => {
            let mass: f64 = y.iter().sum();
            p.iter().zip(y).map(|(pi, yi)| pi * mass - yi).collect()
        }
        LossKind::Dice => {
            let grad_p: Vec<f64> = p
                .iter()
                .zip(y)
                .map(|(&pi, &yi)| {
                    let d = (yi + pi).max(PROB_EPS);
                    -2.0 * yi * yi / (d * d)
                })
                .collect();
            softmax_vjp(p, &grad_p)
        }
    }
}

fn check_trace(params: &ModelParams, trace: &ForwardTrace) -> Result<()> {
    ensure_len("trace input", params.input_dim(), trace.input.len())?;
    ensure_len("trace layers", params.backbone.len(), trace.activations.len())?;
    ensure_len("trace layers", params.backbone.len(), trace.pre_activations.len())?;
    for (layer, (h, a)) in params
        .backbone
        .iter()
        .zip(trace.pre_activations.iter().zip(&trace.activations))
    {
        ensure_len("trace pre-activation", layer.outputs(), h.len())?;
        ensure_len("trace activation", layer.outputs(), a.len())?;
    }
    ensure_len("trace features", params.feature_dim(), trace.features.len())?;
    ensure_len("trace logits", params.n_classes(), trace.logits.len())?;
    Ok(())
}

/// Reverse pass given `dL/du` and an optional extra `dL/dz` term that enters
/// the head input directly (used by the distillation penalty).
pub fn backprop(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_logits: &[f64],
    grad_features: Option<&[f64]>,
) -> Result<ModelParams> {
    check_trace(params, trace)?;
    ensure_len("backprop logits", params.n_classes(), grad_logits.len())?;
    let mut grad = params.zeros_like();

    let c = params.n_classes();
    let z = &trace.features;
    for (k, &zk) in z.iter().enumerate() {
        let row = &mut grad.head.weight.as_mut_slice()[k * c..(k + 1) * c];
        for (g, du) in row.iter_mut().zip(grad_logits) {
            *g = zk * du;
        }
    }
    grad.head.bias.copy_from_slice(grad_logits);
    let mut upstream = params.head.weight.matvec(grad_logits)?;
    if let Some(extra) = grad_features {
        ensure_len("backprop features", params.feature_dim(), extra.len())?;
        axpy(1.0, extra, &mut upstream);
    }

    for l in (0..params.backbone.len()).rev() {
        let layer = &params.backbone[l];
        let dh: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre_activations[l])
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let a_prev = if l == 0 {
            &trace.input
        } else {
            &trace.activations[l - 1]
        };
        let out = layer.outputs();
        let gl = &mut grad.backbone[l];
        for (i, &ai) in a_prev.iter().enumerate() {
            let row = &mut gl.weight.as_mut_slice()[i * out..(i + 1) * out];
            for (g, d) in row.iter_mut().zip(&dh) {
                *g = ai * d;
            }
        }
        gl.bias.copy_from_slice(&dh);
        upstream = layer.weight.matvec(&dh)?;
    }
    Ok(grad)
}

/// Gradient of `loss(kind, p, y)` w.r.t. every parameter.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    y: &[f64],
    kind: LossKind,
) -> Result<ModelParams> {
    ensure_len("backward labels", params.n_classes(), y.len())?;
    let du = logit_gradient(kind, &trace.probs, y);
    backprop(params, trace, &du, None)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradient<X: AsRef<[f64]>, Y: AsRef<[f64]>>(
    params: &ModelParams,
    inputs: &[X],
    labels: &[Y],
    kind: LossKind,
) -> Result<(f64, ModelParams)> {
    if inputs.is_empty() {
        return Err(Error::Empty("batch_gradient"));
    }
    ensure_len("batch_gradient labels", inputs.len(), labels.len())?;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / inputs.len() as f64;
    for (x, y) in inputs.iter().zip(labels) {
        let trace = forward(params, x.as_ref())?;
        total += loss(kind, &trace.probs, y.as_ref())?;
        grad.axpy(scale, &backward(params, &trace, y.as_ref(), kind)?);
    }
    Ok((total * scale, grad))
}

/// Which stream a per-sample gradient came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTag {
    pub domain: Option<Domain>,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleHeadGradient {
    /// Head weight gradient (row-major `m x c`) followed by the head bias gradient.
    pub values: Vec<f64>,
    pub sample_id: usize,
    pub group: GroupTag,
}

/// `vec(z (p - y)^T) ++ (p - y)`: the softmax-CE head gradient of one sample.
pub fn closed_form_ce_head_gradient(trace: &ForwardTrace, y: &[f64]) -> Vec<f64> {
    let residual: Vec<f64> = trace.probs.iter().zip(y).map(|(p, y)| p - y).collect();
    let mut out = Vec::with_capacity(trace.features.len() * residual.len() + residual.len());
    for &zk in &trace.features {
        out.extend(residual.iter().map(|r| zk * r));
    }
    out.extend_from_slice(&residual);
    out
}

/// Per-sample head gradients by backprop. Samples are tagged with their batch
/// position and the argmax of their label.
pub fn per_sample_head_gradients<X: AsRef<[f64]>, Y: AsRef<[f64]>>(
    params: &ModelParams,
    inputs: &[X],
    labels: &[Y],
    kind: LossKind,
) -> Result<Vec<PerSampleHeadGradient>> {
    if inputs.is_empty() {
        return Err(Error::Empty("per_sample_head_gradients"));
    }
    ensure_len("per_sample_head_gradients labels", inputs.len(), labels.len())?;
    inputs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, y))| {
            let trace = forward(params, x.as_ref())?;
            let grad = backward(params, &trace, y.as_ref(), kind)?;
            Ok(PerSampleHeadGradient {
                values: grad.head_flat(),
                sample_id: i,
                group: GroupTag {
                    domain: None,
                    class: argmax(y.as_ref()),
                },
            })
        })
        .collect()
}

/// Checks the single-sample CE gradient factorisation under a uniform label.
///
/// Returns `(lhs, rhs)` with `lhs = sum_i |dL/dtheta_i|` over head-weight
/// columns (taken from backprop) and `rhs = (1/c) sum_i |1 - c p_i| * |z|`
/// (taken from the forward trace alone).
pub fn ce_factorization_check(params: &ModelParams, x: &[f64]) -> Result<(f64, f64)> {
    let trace = forward(params, x)?;
    let c = params.n_classes();
    let y = vec![1.0 / c as f64; c];
    let grad = backward(params, &trace, &y, LossKind::CrossEntropy)?;
    let lhs = (0..c).map(|j| norm(&grad.head.weight.column(j))).sum();
    let output_term: f64 = trace
        .probs
        .iter()
        .map(|p| (1.0 - c as f64 * p).abs())
        .sum();
    let rhs = output_term * norm(&trace.features) / c as f64;
    Ok((lhs, rhs))
}

/// Writes the text checkpoint: magic and version, the layer widths, then one
/// line per tensor in declaration order (`name dims... : values...`). Values
/// use the shortest round-trip exponent form, so reading back is bit-exact.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    let widths: Vec<String> = params.widths().iter().map(|w| w.to_string()).collect();
    writeln!(out, "widths {}", widths.join(" "))?;
    let mut tensor = |name: String, dims: &[usize], values: &[f64]| -> Result<()> {
        write!(out, "{name}")?;
        for d in dims {
            write!(out, " {d}")?;
        }
        write!(out, " :")?;
        for v in values {
            write!(out, " {v:e}")?;
        }
        writeln!(out)?;
        Ok(())
    };
    let layers = params
        .backbone
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("backbone.{i}"), l))
        .chain(std::iter::once(("head".to_string(), &params.head)));
    for (name, layer) in layers {
        tensor(
            format!("{name}.weight"),
            &[layer.weight.rows(), layer.weight.cols()],
            layer.weight.as_slice(),
        )?;
        tensor(format!("{name}.bias"), &[layer.bias.len()], &layer.bias)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<ModelParams> {
    let mut lines = input.lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format(format!("checkpoint truncated before {what}")))?
            .map_err(Error::from)
    };
    let header = next_line("header")?;
    let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    if header.trim() != expected {
        return Err(Error::Format(format!(
            "unsupported checkpoint header {header:?}, expected {expected:?}"
        )));
    }
    let widths_line = next_line("widths")?;
    let widths: Vec<usize> = widths_line
        .strip_prefix("widths ")
        .ok_or_else(|| Error::Format("missing widths line".into()))?
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| Error::Format(format!("bad width {w:?}"))))
        .collect::<Result<_>>()?;
    let mut params = ModelParams::zeros(&widths)?;

    let n_layers = params.backbone.len() + 1;
    for idx in 0..n_layers {
        let name = if idx < params.backbone.len() {
            format!("backbone.{idx}")
        } else {
            "head".to_string()
        };
        let layer = if idx < params.backbone.len() {
            &mut params.backbone[idx]
        } else {
            &mut params.head
        };
        let dims = [layer.weight.rows(), layer.weight.cols()];
        let w = parse_tensor(&next_line("weight")?, &format!("{name}.weight"), &dims)?;
        layer.weight.as_mut_slice().copy_from_slice(&w);
        let b = parse_tensor(&next_line("bias")?, &format!("{name}.bias"), &[layer.bias.len()])?;
        layer.bias.copy_from_slice(&b);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint"));
    }
    Ok(params)
}

fn parse_tensor(line: &str, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let (head, body) = line
        .split_once(" :")
        .ok_or_else(|| Error::Format(format!("malformed tensor line for {name}")))?;
    let mut parts = head.split_whitespace();
    if parts.next() != Some(name) {
        return Err(Error::Format(format!("expected tensor {name}, got {head:?}")));
    }
    let got: Vec<usize> = parts
        .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dim {d:?}"))))
        .collect::<Result<_>>()?;
    if got != dims {
        return Err(Error::Format(format!(
            "tensor {name} has dims {got:?}, expected {dims:?}"
        )));
    }
    let values: Vec<f64> = body
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::Format(format!("bad value {v:?}"))))
        .collect::<Result<_>>()?;
    ensure_len("checkpoint tensor", dims.iter().product(), values.len())?;
    Ok(values)
}

impl ModelParams {
    /// Checks that `other` has the same layer widths.
    pub fn ensure_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "parameter shapes differ: {:?} vs {:?}",
                self.widths(),
                other.widths()
            )))
        }
    }
}
