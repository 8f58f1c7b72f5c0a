//! A small fully-connected network with hand-written backpropagation.
//!
//! The encoder maps inputs to representations, heads map representations to
//! logits. Parameters are plain row-major `f64` buffers; gradients reuse the
//! parameter types so optimizers and checksums can walk both uniformly.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            // written out so NaN propagates instead of clamping to 0
            Activation::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre- and post-activation values.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid("activation", format!("unknown activation `{other}`"))),
        }
    }
}

/// Uniform access to the tensors of a parameter set.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// A hash of the exact bit patterns of every parameter.
    fn checksum(&self) -> u64 {
        // FNV-1a over the raw bits; stable across runs and platforms.
        let mut h = Fnv(0xcbf2_9ce4_8422_2325);
        for t in self.tensors() {
            h.write_usize(t.len());
            for v in t {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

struct Fnv(u64);

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Affine layer `y = W x + b`, with `W` stored `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.in_dim);
        let mut out = Vec::with_capacity(n * self.out_dim);
        for row in x.chunks_exact(self.in_dim) {
            for (w, b) in self.weight.chunks_exact(self.in_dim).zip(&self.bias) {
                out.push(dot(w, row) + b);
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when asked for it.
    fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear, want_input: bool) -> Option<Vec<f64>> {
        let mut grad_in = want_input.then(|| vec![0.0; x.len()]);
        for (n, (row, g)) in x
            .chunks_exact(self.in_dim)
            .zip(grad_out.chunks_exact(self.out_dim))
            .enumerate()
        {
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                grads.bias[o] += go;
                axpy(go, row, &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim]);
                if let Some(gi) = grad_in.as_mut() {
                    axpy(
                        go,
                        &self.weight[o * self.in_dim..(o + 1) * self.in_dim],
                        &mut gi[n * self.in_dim..(n + 1) * self.in_dim],
                    );
                }
            }
        }
        grad_in
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Encoder `g`: `d -> hidden -> feature_dim`, activation after both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Intermediate values of a batched encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub n: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl EncoderCache {
    /// The representations, `n x feature_dim`.
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("encoder has layers")
    }
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        feature_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: vec![
                Linear::init(input_dim, hidden, rng),
                Linear::init(hidden, feature_dim, rng),
            ],
            activation,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, feature_dim: usize, activation: Activation) -> Self {
        Self {
            layers: vec![Linear::zeros(input_dim, hidden), Linear::zeros(hidden, feature_dim)],
            activation,
        }
    }

    /// Same shapes, all zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.in_dim, l.out_dim))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("encoder has layers").out_dim
    }

    /// Representations of a row-major batch of `n` inputs.
    pub fn encode_batch(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut h = self.layers[0].forward(x, n);
        h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        for layer in &self.layers[1..] {
            h = layer.forward(&h, n);
            h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        }
        h
    }

    /// Forward pass keeping what [`Encoder::backward`] needs.
    pub fn forward_cached(&self, x: &[f64], n: usize) -> EncoderCache {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &post[i - 1] };
            let z = layer.forward(input, n);
            let a = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        EncoderCache {
            n,
            input: x.to_vec(),
            pre,
            post,
        }
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the representations) and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(&self, cache: &EncoderCache, grad_out: &[f64], grads: &mut Encoder) {
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            for ((gv, &z), &a) in g.iter_mut().zip(&cache.pre[i]).zip(&cache.post[i]) {
                *gv *= self.activation.derivative(z, a);
            }
            let input = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            let next = self.layers[i].backward(input, &g, &mut grads.layers[i], i > 0);
            if let Some(next) = next {
                g = next;
            }
        }
    }
}

impl Params for Encoder {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// A linear classification head, `feature_dim -> K`, no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub layer: Linear,
}

impl Head {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, k: usize, rng: &mut R) -> Self {
        Self {
            layer: Linear::init(feature_dim, k, rng),
        }
    }

    pub fn zeros(feature_dim: usize, k: usize) -> Self {
        Self {
            layer: Linear::zeros(feature_dim, k),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layer.in_dim, self.layer.out_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.layer.out_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.in_dim
    }

    pub fn logits_batch(&self, z: &[f64], n: usize) -> Vec<f64> {
        self.layer.forward(z, n)
    }

    /// Accumulates head gradients and returns the representation gradient.
    pub fn backward(&self, z: &[f64], grad_logits: &[f64], grads: &mut Head, want_input: bool) -> Option<Vec<f64>> {
        self.layer.backward(z, grad_logits, &mut grads.layer, want_input)
    }
}

impl Params for Head {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layer.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer.tensors_mut()
    }
}

/// Representation of a single input.
pub fn encode(g: &Encoder, x: &[f64]) -> Vec<f64> {
    g.encode_batch(x, 1)
}

/// Logits of a single representation.
pub fn classify(h: &Head, z: &[f64]) -> Vec<f64> {
    h.logits_batch(z, 1)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy targets for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    /// Hard labels where rejected rows contribute neither loss nor gradient
    /// but still count toward the batch mean.
    Masked { labels: &'a [usize], accepted: &'a [bool] },
    /// Row-major `n x K` probability vectors.
    Soft(&'a [f64]),
}

impl Targets<'_> {
    fn len(&self, k: usize) -> usize {
        match self {
            Targets::Hard(l) => l.len(),
            Targets::Masked { labels, .. } => labels.len(),
            Targets::Soft(p) => p.len() / k,
        }
    }
}

/// Mean softmax cross entropy over all `n` rows and its logit gradient.
pub fn softmax_cross_entropy(logits: &[f64], k: usize, targets: Targets<'_>) -> Result<(f64, Vec<f64>)> {
    let n = logits.len() / k;
    if targets.len(k) != n || logits.len() != n * k {
        return Err(Error::Shape(format!(
            "{} logits with k = {k} against {} targets",
            logits.len(),
            targets.len(k)
        )));
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, row) in logits.chunks_exact(k).enumerate() {
        let weight_row: Option<&[f64]>;
        let hard: Option<usize>;
        match targets {
            Targets::Hard(l) => {
                hard = Some(l[i]);
                weight_row = None;
            }
            Targets::Masked { labels, accepted } => {
                if !accepted[i] {
                    continue;
                }
                hard = Some(labels[i]);
                weight_row = None;
            }
            Targets::Soft(p) => {
                hard = None;
                weight_row = Some(&p[i * k..(i + 1) * k]);
            }
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        let g = &mut grad[i * k..(i + 1) * k];
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = (l - log_z).exp() * inv_n;
        }
        match (hard, weight_row) {
            (Some(y), _) => {
                if y >= k {
                    return Err(Error::invalid("target", format!("class {} outside 1..={k}", y + 1)));
                }
                loss -= row[y] - log_z;
                g[y] -= inv_n;
            }
            (None, Some(p)) => {
                for j in 0..k {
                    loss -= p[j] * (row[j] - log_z);
                    g[j] -= p[j] * inv_n;
                }
            }
            (None, None) => unreachable!(),
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure {
            step: 0,
            detail: format!("cross entropy evaluated to {loss}"),
        });
    }
    Ok((loss, grad))
}

/// Which parameters a loss produces gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Full,
    EncoderFrozen,
}

/// Gradients of a loss through an encoder and head.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    /// `None` in [`GradMode::EncoderFrozen`].
    pub encoder: Option<Encoder>,
    pub head: Head,
}

impl Grads {
    /// Adds `other` into `self`, coordinate by coordinate.
    pub fn accumulate(&mut self, other: &Grads) {
        add_into(&mut self.head, &other.head);
        if let (Some(a), Some(b)) = (self.encoder.as_mut(), other.encoder.as_ref()) {
            add_into(a, b);
        }
    }
}

/// `dst += src` over matching parameter sets.
pub fn add_into<P: Params>(dst: &mut P, src: &P) {
    for (d, s) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

/// Mean cross entropy of `head(encoder(inputs))` against `targets`, and its gradients.
pub fn cross_entropy_and_grads(
    encoder: &Encoder,
    head: &Head,
    inputs: &[f64],
    targets: Targets<'_>,
    mode: GradMode,
) -> Result<(f64, Grads)> {
    let n = inputs.len() / encoder.input_dim();
    let cache = encoder.forward_cached(inputs, n);
    let logits = head.logits_batch(cache.output(), n);
    let (loss, grad_logits) = softmax_cross_entropy(&logits, head.num_classes(), targets)?;
    let mut head_grads = head.zeros_like();
    let frozen = mode == GradMode::EncoderFrozen;
    let grad_z = head.backward(cache.output(), &grad_logits, &mut head_grads, !frozen);
    let encoder_grads = grad_z.map(|gz| {
        let mut eg = encoder.zeros_like();
        encoder.backward(&cache, &gz, &mut eg);
        eg
    });
    Ok((
        loss,
        Grads {
            encoder: encoder_grads,
            head: head_grads,
        },
    ))
}

/// Mean cross entropy of `head(z)` on precomputed representations.
/// Returns the head gradients and the representation gradient.
pub fn head_cross_entropy_and_grads(
    head: &Head,
    z: &[f64],
    targets: Targets<'_>,
    want_input: bool,
) -> Result<(f64, Head, Option<Vec<f64>>)> {
    let n = z.len() / head.feature_dim();
    let logits = head.logits_batch(z, n);
    let (loss, grad_logits) = softmax_cross_entropy(&logits, head.num_classes(), targets)?;
    let mut grads = head.zeros_like();
    let grad_z = head.backward(z, &grad_logits, &mut grads, want_input);
    Ok((loss, grads, grad_z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new<P: Params>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Momentum copy `xi` of an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Encoder,
    pub momentum: f64,
}

impl EmaState {
    /// Starts the shadow at `g` itself.
    pub fn new(g: &Encoder, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "ema_momentum",
                format!("must lie in [0, 1), got {momentum}"),
            ));
        }
        Ok(Self {
            shadow: g.clone(),
            momentum,
        })
    }

    /// `xi <- m * xi + (1 - m) * g` for every parameter.
    pub fn update(&mut self, g: &Encoder) {
        let m = self.momentum;
        for (s, p) in self.shadow.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, b) in s.iter_mut().zip(p) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
    }
}

/// A named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, versioned text dump of named tensors plus string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

pub const CHECKPOINT_MAGIC: &str = "cossl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn push_linear(&mut self, prefix: &str, l: &Linear) {
        self.tensors.push(NamedTensor {
            name: format!("{prefix}.weight"),
            shape: vec![l.out_dim, l.in_dim],
            data: l.weight.clone(),
        });
        self.tensors.push(NamedTensor {
            name: format!("{prefix}.bias"),
            shape: vec![l.out_dim],
            data: l.bias.clone(),
        });
    }

    pub fn push_encoder(&mut self, prefix: &str, e: &Encoder) {
        self.meta
            .insert(format!("{prefix}.activation"), e.activation.name().to_string());
        for (i, l) in e.layers.iter().enumerate() {
            self.push_linear(&format!("{prefix}.{i}"), l);
        }
    }

    pub fn push_head(&mut self, prefix: &str, h: &Head) {
        self.push_linear(prefix, &h.layer);
    }

    fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name || t.name.starts_with(&format!("{name}.")))
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear> {
        let w = self.tensor(&format!("{prefix}.weight"))?;
        let b = self.tensor(&format!("{prefix}.bias"))?;
        if w.shape.len() != 2 || b.shape != [w.shape[0]] {
            return Err(Error::Shape(format!("inconsistent shapes for `{prefix}`")));
        }
        Ok(Linear {
            out_dim: w.shape[0],
            in_dim: w.shape[1],
            weight: w.data.clone(),
            bias: b.data.clone(),
        })
    }

    pub fn encoder(&self, prefix: &str) -> Result<Encoder> {
        let activation: Activation = self
            .meta
            .get(&format!("{prefix}.activation"))
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing `{prefix}.activation`")))?
            .parse()?;
        let mut layers = Vec::new();
        while self.contains(&format!("{prefix}.{}", layers.len())) {
            layers.push(self.linear(&format!("{prefix}.{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(Error::invalid("checkpoint", format!("no layers for `{prefix}`")));
        }
        Ok(Encoder { layers, activation })
    }

    pub fn head(&self, prefix: &str) -> Result<Head> {
        Ok(Head {
            layer: self.linear(prefix)?,
        })
    }

    /// Writes the text form. Values use the shortest representation that
    /// parses back to the same bits.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}")?;
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            writeln!(out, "tensor {} {}", t.name, dims.join(","))?;
            let mut first = true;
            for v in &t.data {
                if !first {
                    out.write_all(b" ")?;
                }
                first = false;
                write!(out, "{v:?}")?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let bad = |line: usize, reason: String| Error::Format {
            what: "checkpoint",
            line,
            reason,
        };
        let io = |line: usize| move |e: std::io::Error| bad(line, e.to_string());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let header = header.map_err(io(1))?;
        let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        if header.trim() != expected {
            return Err(bad(1, format!("expected header `{expected}`, got `{header}`")));
        }
        let mut ckpt = Checkpoint::default();
        while let Some((i, line)) = lines.next() {
            let line_no = i + 1;
            let line = line.map_err(io(line_no))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad(line_no, "meta without key".into()))?;
                    let value = parts.next().unwrap_or("");
                    ckpt.meta.insert(key.to_string(), value.to_string());
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| bad(line_no, "tensor without name".into()))?;
                    let dims = parts.next().ok_or_else(|| bad(line_no, "tensor without shape".into()))?;
                    let shape: Vec<usize> = dims
                        .split(',')
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(line_no, format!("bad shape: {e}")))?;
                    let (j, values) = lines
                        .next()
                        .ok_or_else(|| bad(line_no + 1, "missing tensor values".into()))?;
                    let values = values.map_err(io(j + 1))?;
                    let data: Vec<f64> = if values.trim().is_empty() {
                        Vec::new()
                    } else {
                        values
                            .split(' ')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| bad(j + 1, format!("bad value: {e}")))?
                    };
                    let expected: usize = shape.iter().product();
                    if data.len() != expected {
                        return Err(bad(
                            j + 1,
                            format!("tensor `{name}` has {} values, shape needs {expected}", data.len()),
                        ));
                    }
                    ckpt.tensors.push(NamedTensor {
                        name: name.to_string(),
                        shape,
                        data,
                    });
                }
                other => return Err(bad(line_no, format!("unexpected record {other:?}"))),
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn net(seed: u64, activation: Activation) -> (Encoder, Head) {
        let mut r = rng::from_seed(seed);
        (Encoder::init(4, 6, 5, activation, &mut r), Head::init(5, 3, &mut r))
    }

    #[test]
    fn zero_encoder_gives_zero_output() {
        let e = Encoder::zeros(3, 4, 2, Activation::Relu);
        assert_eq!(encode(&e, &[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
        let h = Head::zeros(2, 10);
        let p = softmax(&classify(&h, &[0.3, 0.1]));
        assert!(p.iter().all(|&q| (q - 0.1).abs() < 1e-15));
    }

    #[test]
    fn batch_forward_matches_rows() {
        let (e, _) = net(1, Activation::Relu);
        let mut r = rng::from_seed(2);
        let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let batch = e.encode_batch(&x, 3);
        for i in 0..3 {
            assert_eq!(&batch[i * 5..(i + 1) * 5], encode(&e, &x[i * 4..(i + 1) * 4]).as_slice());
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = l.iter().map(|v| v + 7.5).collect();
        for (a, b) in softmax(&l).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_head_adds_bias() {
        let mut h = Head::zeros(3, 3);
        for i in 0..3 {
            h.layer.weight[i * 3 + i] = 1.0;
        }
        h.layer.bias = vec![0.5, -1.0, 2.0];
        assert_eq!(classify(&h, &[1.0, 2.0, 3.0]), vec![1.5, 1.0, 5.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let (loss, _) = softmax_cross_entropy(&[0.0; 10], 10, Targets::Hard(&[3])).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for step in 0..40 {
            let margin = step as f64 * 0.5;
            let (loss, _) = softmax_cross_entropy(&[margin, 0.0, 0.0], 3, Targets::Hard(&[0])).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn masked_rows_contribute_nothing() {
        let logits = [1.0, 2.0, 0.5, 0.5];
        let (loss, grad) = softmax_cross_entropy(
            &logits,
            2,
            Targets::Masked {
                labels: &[0, 1],
                accepted: &[false, false],
            },
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let err = softmax_cross_entropy(&[f64::NAN, 0.0], 2, Targets::Hard(&[0])).unwrap_err();
        assert!(matches!(err.at_step(17), Error::NumericalFailure { step: 17, .. }));
    }

    #[test]
    fn encoder_frozen_mode_has_no_encoder_grads() {
        let (e, h) = net(3, Activation::Relu);
        let x = vec![0.1; 8];
        let (_, g) = cross_entropy_and_grads(&e, &h, &x, Targets::Hard(&[0, 1]), GradMode::EncoderFrozen).unwrap();
        assert!(g.encoder.is_none());
        let (_, g) = cross_entropy_and_grads(&e, &h, &x, Targets::Hard(&[0, 1]), GradMode::Full).unwrap();
        assert!(g.encoder.is_some());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let (_, mut h) = net(4, Activation::Relu);
        let before = h.clone();
        let mut opt = OptState::new(&h, AdamConfig::default());
        let zero = h.zeros_like();
        opt.step(&mut h, &zero);
        assert_eq!(h, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let (_, mut h) = net(5, Activation::Relu);
        let before = h.clone();
        let mut grads = h.zeros_like();
        for (i, v) in grads.layer.weight.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.3 } else { -2.0 };
        }
        let mut opt = OptState::new(&h, AdamConfig::default());
        opt.step(&mut h, &grads);
        for ((a, b), g) in h.layer.weight.iter().zip(&before.layer.weight).zip(&grads.layer.weight) {
            assert!(((a - b) + 0.002 * g.signum()).abs() < 1e-9);
        }
        assert_eq!(h.layer.bias, before.layer.bias);
    }

    #[test]
    fn adam_descends_a_convex_quadratic() {
        // f(p) = 0.5 * sum(c_i * (p_i - t_i)^2)
        let mut p = Linear::zeros(3, 1);
        p.weight = vec![2.0, -1.5, 0.7];
        p.bias = vec![1.0];
        let target = [0.5, 0.25, -1.0, 0.0];
        let curv = [1.0, 3.0, 0.5, 2.0];
        let loss = |p: &Linear| {
            p.weight
                .iter()
                .chain(&p.bias)
                .zip(target.iter().zip(&curv))
                .map(|(v, (t, c))| 0.5 * c * (v - t) * (v - t))
                .sum::<f64>()
        };
        let mut opt = OptState::new(
            &p,
            AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
        );
        let mut losses = vec![loss(&p)];
        for _ in 0..100 {
            let mut g = Linear::zeros(3, 1);
            for (i, (gv, v)) in g
                .weight
                .iter_mut()
                .chain(g.bias.iter_mut())
                .zip(p.weight.iter().chain(&p.bias))
                .enumerate()
            {
                *gv = curv[i] * (v - target[i]);
            }
            opt.step(&mut p, &g);
            losses.push(loss(&p));
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[100] < 0.5 * losses[0]);
    }

    #[test]
    fn ema_with_zero_momentum_copies() {
        let (g0, _) = net(6, Activation::Relu);
        let (g1, _) = net(7, Activation::Relu);
        let mut ema = EmaState::new(&g0, 0.0).unwrap();
        assert_eq!(ema.shadow, g0);
        ema.update(&g1);
        assert_eq!(ema.shadow, g1);
        assert!(EmaState::new(&g0, 1.0).is_err());
        assert!(EmaState::new(&g0, -0.1).is_err());
    }

    #[test]
    fn ema_constant_input_closed_form() {
        let (g0, _) = net(8, Activation::Relu);
        let (g, _) = net(9, Activation::Relu);
        let m = 0.9;
        let mut ema = EmaState::new(&g0, m).unwrap();
        let t = 50;
        for _ in 0..t {
            ema.update(&g);
        }
        for ((s, x0), x) in ema.shadow.tensors().iter().zip(g0.tensors()).zip(g.tensors()) {
            for i in 0..s.len() {
                let expect = x[i] + m.powi(t) * (x0[i] - x[i]);
                assert!((s[i] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn checksum_tracks_bits() {
        let (e, _) = net(10, Activation::Relu);
        let mut f = e.clone();
        assert_eq!(e.checksum(), f.checksum());
        f.layers[1].bias[0] = f64::from_bits(f.layers[1].bias[0].to_bits() ^ 1);
        assert_ne!(e.checksum(), f.checksum());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (e, h) = net(11, Activation::Tanh);
        let mut c = Checkpoint::default();
        c.meta.insert("mode".into(), "cossl".into());
        c.push_encoder("encoder", &e);
        c.push_head("head", &h);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let e2 = back.encoder("encoder").unwrap();
        let h2 = back.head("head").unwrap();
        assert_eq!(e2.checksum(), e.checksum());
        assert_eq!(h2.checksum(), h.checksum());
        assert_eq!(e2.activation, Activation::Tanh);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let text = "cossl-checkpoint 99\n";
        assert!(matches!(Checkpoint::read(text.as_bytes()), Err(Error::Format { line: 1, .. })));
    }
}
