//! A small multilayer perceptron with manual reverse-mode differentiation.
//!
//! The bias of every layer is folded into its weight matrix: layer `l` maps an
//! input `h` of length `d_in` through `W_l · [h; 1]` where `W_l` has shape
//! `d_out × (d_in + 1)`. Parameters are flattened layer by layer, row-major.
//!
//! Losses are **sums** over the batch, not means. Influence magnitudes depend
//! on this convention, so it is fixed here and relied upon everywhere else.
//!
//! Beyond plain gradients the module exposes exact Hessian-vector products
//! (forward-over-reverse, not finite differences), explicit dense Hessians at
//! small parameter counts, and per-example activation/gradient captures used
//! for Kronecker-factored curvature fits.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn first(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    // Second derivative; ReLU uses the almost-everywhere value 0.
    #[inline]
    fn second(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// Stable one-byte code used by the binary container format.
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            _ => Err(Error::Container(format!("unknown activation code {code}"))),
        }
    }
}

/// Loss applied per example; batch losses are sums of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

/// Layer sizes plus per-hidden-layer activations. The final layer always
/// produces raw logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config {
                path: "arch.layer_sizes".into(),
                message: "need at least an input and an output size".into(),
            });
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config {
                path: "arch.layer_sizes".into(),
                message: "layer sizes must be positive".into(),
            });
        }
        let hidden = layer_sizes.len() - 2;
        if activations.len() != hidden {
            return Err(Error::Config {
                path: "arch.activations".into(),
                message: format!("expected {hidden} activations (one per hidden layer), got {}", activations.len()),
            });
        }
        Ok(Self { layer_sizes, activations })
    }

    /// Single linear layer, `input -> output` logits. Quadratic under MSE.
    pub fn linear(input: usize, output: usize) -> Self {
        Self::new(vec![input, output], vec![]).expect("linear architecture is always valid")
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Number of weight layers.
    pub fn layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// (d_out, d_in + 1) for layer `l`, bias column included.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l] + 1)
    }

    /// Offset of layer `l` in the flattened parameter vector.
    pub fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| {
                let (r, c) = self.layer_shape(k);
                r * c
            })
            .sum()
    }

    /// Total parameter count, biases included.
    pub fn param_count(&self) -> usize {
        self.layer_offset(self.layers())
    }

    fn activation_at(&self, l: usize) -> Activation {
        if l + 1 < self.layers() {
            self.activations[l]
        } else {
            Activation::Identity
        }
    }
}

/// Flattened model parameters tied to an [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    arch: Arc<Architecture>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(arch: Arc<Architecture>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector of len {} does not match architecture ({} params)",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter value".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Arc<Architecture>) -> Self {
        let n = arch.param_count();
        Self { arch, values: vec![0.0; n] }
    }

    /// Deterministic initialization: weights uniform in ±sqrt(6/(d_in+d_out))
    /// from a dedicated RNG stream per layer, bias entries zero.
    pub fn seeded_init(arch: Arc<Architecture>, seed: u64) -> Self {
        let mut values = vec![0.0; arch.param_count()];
        for l in 0..arch.layers() {
            let (d_out, d_in1) = arch.layer_shape(l);
            let d_in = d_in1 - 1;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(l as u64 + 1);
            let s = (6.0 / (d_in + d_out) as f64).sqrt();
            let base = arch.layer_offset(l);
            for r in 0..d_out {
                for c in 0..d_in {
                    values[base + r * d_in1 + c] = rng.random_range(-s..s);
                }
                // bias column stays zero
            }
        }
        Self { arch, values }
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_slice(&self, l: usize) -> &[f64] {
        let (r, c) = self.arch.layer_shape(l);
        let base = self.arch.layer_offset(l);
        &self.values[base..base + r * c]
    }

    /// Returns a copy with `delta` added to the flat values.
    pub fn offset_by(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "offset of len {} vs parameters of len {}",
                delta.len(),
                self.values.len()
            )));
        }
        let values = self.values.iter().zip(delta).map(|(a, b)| a + b).collect();
        Self::new(self.arch.clone(), values)
    }
}

/// One labeled example: numeric features and a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// Captured intermediate state of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of each layer (`h_0 .. h_{L-1}`), bias coordinate not included.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer (`o_1 .. o_L`).
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Final-layer outputs; the last layer applies no activation.
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().unwrap()
    }
}

/// Per-example quantities needed by Kronecker-factored curvature fits.
#[derive(Debug, Clone)]
pub struct ExampleCapture {
    pub loss: f64,
    /// Flattened gradient of this example's loss.
    pub grad: Vec<f64>,
    /// Per layer: input with the folded bias coordinate appended.
    pub layer_inputs_aug: Vec<Vec<f64>>,
    /// Per layer: gradient of the loss w.r.t. the pre-activation output.
    pub output_grads: Vec<Vec<f64>>,
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Runs the network on `x`, capturing per-layer activations.
pub fn forward(p: &ParamVector, x: &[f64]) -> Result<ForwardTrace> {
    let arch = p.arch();
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input of len {} vs model input dim {}",
            x.len(),
            arch.input_dim()
        )));
    }
    let mut layer_inputs = Vec::with_capacity(arch.layers());
    let mut pre_activations = Vec::with_capacity(arch.layers());
    let mut h = x.to_vec();
    for l in 0..arch.layers() {
        let (d_out, d_in1) = arch.layer_shape(l);
        let w = p.layer_slice(l);
        let mut o = vec![0.0; d_out];
        for r in 0..d_out {
            let row = &w[r * d_in1..(r + 1) * d_in1];
            let mut s = row[d_in1 - 1]; // bias
            for c in 0..d_in1 - 1 {
                s += row[c] * h[c];
            }
            o[r] = s;
        }
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pre-activation of layer {l}")));
        }
        layer_inputs.push(std::mem::take(&mut h));
        let act = arch.activation_at(l);
        h = o.iter().map(|&v| act.value(v)).collect();
        pre_activations.push(o);
    }
    Ok(ForwardTrace { layer_inputs, pre_activations })
}

/// Class prediction: argmax of the logits.
pub fn predict(p: &ParamVector, x: &[f64]) -> Result<usize> {
    let trace = forward(p, x)?;
    let logits = trace.logits();
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

fn loss_value_from_logits(logits: &[f64], label: usize, loss: Loss) -> f64 {
    match loss {
        Loss::CrossEntropy => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            lse - logits[label]
        }
        Loss::Mse => {
            let mut s = 0.0;
            for (c, &v) in logits.iter().enumerate() {
                let t = if c == label { 1.0 } else { 0.0 };
                s += (v - t) * (v - t);
            }
            0.5 * s
        }
    }
}

/// Gradient of the per-example loss w.r.t. the logits.
fn output_grad(logits: &[f64], label: usize, loss: Loss) -> Vec<f64> {
    match loss {
        Loss::CrossEntropy => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut g: Vec<f64> = exps.iter().map(|&e| e / z).collect();
            g[label] -= 1.0;
            g
        }
        Loss::Mse => logits
            .iter()
            .enumerate()
            .map(|(c, &v)| v - if c == label { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Directional derivative of [`output_grad`] given a logit tangent.
fn output_grad_tangent(logits: &[f64], logit_tangent: &[f64], loss: Loss) -> Vec<f64> {
    match loss {
        Loss::CrossEntropy => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
            let pdot: f64 = probs.iter().zip(logit_tangent).map(|(p, t)| p * t).sum();
            probs.iter().zip(logit_tangent).map(|(p, t)| p * (t - pdot)).collect()
        }
        Loss::Mse => logit_tangent.to_vec(),
    }
}

struct ExamplePass {
    loss: f64,
    trace: ForwardTrace,
    /// Tangents of pre-activations, present when an HVP direction was given.
    o_tangents: Option<Vec<Vec<f64>>>,
    /// Tangents of layer inputs.
    h_tangents: Option<Vec<Vec<f64>>>,
}

/// Forward pass, optionally carrying a parameter-space tangent `v` used for
/// Hessian-vector products.
fn forward_with_tangent(
    p: &ParamVector,
    x: &[f64],
    loss: Loss,
    tangent: Option<&[f64]>,
    label: usize,
) -> Result<ExamplePass> {
    let arch = p.arch();
    check_label(label, arch.output_dim())?;
    let trace = forward(p, x)?;
    let (o_tangents, h_tangents) = match tangent {
        None => (None, None),
        Some(v) => {
            let mut o_tans: Vec<Vec<f64>> = Vec::with_capacity(arch.layers());
            let mut h_tans: Vec<Vec<f64>> = Vec::with_capacity(arch.layers());
            let mut h_dot = vec![0.0; x.len()];
            for l in 0..arch.layers() {
                let (d_out, d_in1) = arch.layer_shape(l);
                let base = arch.layer_offset(l);
                let w = p.layer_slice(l);
                let h = &trace.layer_inputs[l];
                let mut o_dot = vec![0.0; d_out];
                for r in 0..d_out {
                    let wrow = &w[r * d_in1..(r + 1) * d_in1];
                    let vrow = &v[base + r * d_in1..base + (r + 1) * d_in1];
                    let mut s = vrow[d_in1 - 1]; // tangent through the bias weight
                    for c in 0..d_in1 - 1 {
                        s += vrow[c] * h[c] + wrow[c] * h_dot[c];
                    }
                    o_dot[r] = s;
                }
                let act = arch.activation_at(l);
                let o = &trace.pre_activations[l];
                h_dot = o.iter().zip(&o_dot).map(|(&ov, &od)| act.first(ov) * od).collect();
                h_tans.push(h_dot.clone());
                o_tans.push(o_dot);
            }
            (Some(o_tans), Some(h_tans))
        }
    };
    let loss_val = loss_value_from_logits(trace.logits(), label, loss);
    Ok(ExamplePass { loss: loss_val, trace, o_tangents, h_tangents })
}

/// Reverse pass accumulating the flat gradient and, when a tangent was
/// carried forward, the flat Hessian-vector product contribution.
#[allow(clippy::too_many_arguments)]
fn backward_accumulate(
    p: &ParamVector,
    pass: &ExamplePass,
    label: usize,
    loss: Loss,
    tangent: Option<&[f64]>,
    grad_out: &mut [f64],
    hvp_out: Option<&mut [f64]>,
    mut capture: Option<&mut ExampleCapture>,
) {
    let arch = p.arch();
    let logits = pass.trace.logits();
    let mut g = output_grad(logits, label, loss);
    let mut g_dot = tangent.map(|_| {
        let o_dot_last = pass.o_tangents.as_ref().unwrap().last().unwrap();
        output_grad_tangent(logits, o_dot_last, loss)
    });
    let mut hvp_out = hvp_out;

    for l in (0..arch.layers()).rev() {
        let (d_out, d_in1) = arch.layer_shape(l);
        let base = arch.layer_offset(l);
        let w = p.layer_slice(l);
        let h = &pass.trace.layer_inputs[l];

        if let Some(cap) = capture.as_deref_mut() {
            let mut aug = h.clone();
            aug.push(1.0);
            cap.layer_inputs_aug[l] = aug;
            cap.output_grads[l] = g.clone();
        }

        // Weight gradients: g ⊗ [h; 1].
        for r in 0..d_out {
            let gr = g[r];
            let row = &mut grad_out[base + r * d_in1..base + (r + 1) * d_in1];
            for c in 0..d_in1 - 1 {
                row[c] += gr * h[c];
            }
            row[d_in1 - 1] += gr;
        }
        if let (Some(hvp), Some(gd)) = (hvp_out.as_deref_mut(), g_dot.as_ref()) {
            // Tangent of the weight gradient:
            //   ġ ⊗ [h; 1] + g ⊗ [ḣ; 0]
            let h_dot_prev: Option<&Vec<f64>> = if l == 0 {
                None
            } else {
                Some(&pass.h_tangents.as_ref().unwrap()[l - 1])
            };
            for r in 0..d_out {
                let gr = g[r];
                let gdr = gd[r];
                let row = &mut hvp[base + r * d_in1..base + (r + 1) * d_in1];
                for c in 0..d_in1 - 1 {
                    let hd = h_dot_prev.map_or(0.0, |hd| hd[c]);
                    row[c] += gdr * h[c] + gr * hd;
                }
                row[d_in1 - 1] += gdr;
            }
        }

        if l == 0 {
            break;
        }

        // Backpropagate to the previous layer's pre-activations.
        let act = arch.activation_at(l - 1);
        let o_prev = &pass.trace.pre_activations[l - 1];
        let d_prev = d_in1 - 1;
        let mut e = vec![0.0; d_prev];
        for r in 0..d_out {
            let gr = g[r];
            let wrow = &w[r * d_in1..(r + 1) * d_in1];
            for c in 0..d_prev {
                e[c] += wrow[c] * gr;
            }
        }
        let mut g_prev = vec![0.0; d_prev];
        for c in 0..d_prev {
            g_prev[c] = e[c] * act.first(o_prev[c]);
        }
        if let Some(gd) = g_dot.as_mut() {
            let v = tangent.unwrap();
            let o_dot_prev = &pass.o_tangents.as_ref().unwrap()[l - 1];
            let mut e_dot = vec![0.0; d_prev];
            for r in 0..d_out {
                let gr = g[r];
                let gdr = gd[r];
                let wrow = &w[r * d_in1..(r + 1) * d_in1];
                let vrow = &v[base + r * d_in1..base + (r + 1) * d_in1];
                for c in 0..d_prev {
                    e_dot[c] += vrow[c] * gr + wrow[c] * gdr;
                }
            }
            let mut gd_prev = vec![0.0; d_prev];
            for c in 0..d_prev {
                gd_prev[c] = e_dot[c] * act.first(o_prev[c])
                    + e[c] * act.second(o_prev[c]) * o_dot_prev[c];
            }
            *gd = gd_prev;
        }
        g = g_prev;
    }
}

/// Summed batch loss and its flat gradient.
pub fn loss_and_grad(p: &ParamVector, batch: &[Example], loss: Loss) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; p.len()];
    for ex in batch {
        let pass = forward_with_tangent(p, &ex.features, loss, None, ex.label)?;
        total += pass.loss;
        backward_accumulate(p, &pass, ex.label, loss, None, &mut grad, None, None);
    }
    Ok((total, grad))
}

/// Summed batch loss only; cheaper than [`loss_and_grad`] for line searches.
pub fn loss_value(p: &ParamVector, batch: &[Example], loss: Loss) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for ex in batch {
        check_label(ex.label, p.arch().output_dim())?;
        let trace = forward(p, &ex.features)?;
        total += loss_value_from_logits(trace.logits(), ex.label, loss);
    }
    Ok(total)
}

/// Exact Hessian-vector product `H · v` of the summed batch loss, computed
/// analytically by carrying a forward tangent through the reverse pass.
pub fn hvp(p: &ParamVector, batch: &[Example], loss: Loss, v: &[f64]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if v.len() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "direction of len {} vs parameters of len {}",
            v.len(),
            p.len()
        )));
    }
    let mut grad = vec![0.0; p.len()];
    let mut out = vec![0.0; p.len()];
    for ex in batch {
        let pass = forward_with_tangent(p, &ex.features, loss, Some(v), ex.label)?;
        backward_accumulate(p, &pass, ex.label, loss, Some(v), &mut grad, Some(&mut out), None);
    }
    Ok(out)
}

/// Guard for explicit Hessian materialization.
pub const DENSE_HESSIAN_GUARD: usize = 4000;

/// Explicit dense Hessian of the summed batch loss; column `j` is the HVP
/// with the `j`-th basis vector.
pub fn dense_hessian(p: &ParamVector, batch: &[Example], loss: Loss) -> Result<DenseMatrix> {
    let n = p.len();
    if n > DENSE_HESSIAN_GUARD {
        return Err(Error::GuardExceeded {
            what: "dense Hessian parameter count",
            found: n,
            guard: DENSE_HESSIAN_GUARD,
        });
    }
    let mut h = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = hvp(p, batch, loss, &e)?;
        e[j] = 0.0;
        for i in 0..n {
            h.set(i, j, col[i]);
        }
    }
    Ok(h)
}

/// Per-example loss, gradient, and layer captures for curvature estimation.
pub fn example_captures(p: &ParamVector, batch: &[Example], loss: Loss) -> Result<Vec<ExampleCapture>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layers = p.arch().layers();
    let mut out = Vec::with_capacity(batch.len());
    for ex in batch {
        let pass = forward_with_tangent(p, &ex.features, loss, None, ex.label)?;
        let mut cap = ExampleCapture {
            loss: pass.loss,
            grad: vec![0.0; p.len()],
            layer_inputs_aug: vec![Vec::new(); layers],
            output_grads: vec![Vec::new(); layers],
        };
        let mut grad = vec![0.0; p.len()];
        backward_accumulate(p, &pass, ex.label, loss, None, &mut grad, None, Some(&mut cap));
        cap.grad = grad;
        out.push(cap);
    }
    Ok(out)
}
