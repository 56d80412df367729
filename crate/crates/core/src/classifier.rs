//! A small permutation-invariant point-cloud classifier.
//!
//! Every point passes through a shared two-layer tanh encoder, a
//! coordinatewise max over points forms the global feature, and a two-layer
//! head produces class logits:
//!
//! ```text
//! x_p (3) -> tanh(W1 x + b1) (h1) -> tanh(W2 . + b2) (h2) -> max over p
//!         -> tanh(W3 . + b3) (h3) -> W4 . + b4 (c logits)
//! ```
//!
//! Forward and backward passes are written out by hand.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attack::margin_loss;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::GradientField;
use crate::seed;
use crate::vecmath::Vec3;

const MAGIC: &[u8; 8] = b"PCADVCK\0";
const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5348;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Activation::Tanh),
            other => Err(Error::format(format!("unknown activation tag {other}"))),
        }
    }
}

/// One affine layer, `out = W in + b`, with `W` stored row-major
/// (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weight {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    #[inline]
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// `din = W^T dout`
    fn back(&self, dout: &[f64], din: &mut [f64]) {
        din.iter_mut().for_each(|d| *d = 0.0);
        for (row, g) in self.weight.chunks_exact(self.inputs).zip(dout) {
            for (d, w) in din.iter_mut().zip(row) {
                *d += w * g;
            }
        }
    }

    fn accumulate(&mut self, dout: &[f64], input: &[f64]) {
        for (row, (g, b)) in self
            .weight
            .chunks_exact_mut(self.inputs)
            .zip(dout.iter().zip(self.bias.iter_mut()))
        {
            *b += g;
            for (w, x) in row.iter_mut().zip(input) {
                *w += g * x;
            }
        }
    }
}

/// Weights of the classifier. `widths` is `[3, h1, h2, h3, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    widths: [usize; 5],
    activation: Activation,
    layers: [Dense; 4],
}

/// Default hidden widths.
pub const DEFAULT_HIDDEN: [usize; 3] = [32, 64, 32];

struct ForwardCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    h3: Vec<f64>,
    logits: Vec<f64>,
}

impl ClassifierParams {
    /// Glorot-uniform weights and zero biases, seeded.
    pub fn init(hidden: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        let widths = [3, hidden[0], hidden[1], hidden[2], classes];
        check_widths(&widths)?;
        let mut rng = seed::rng(seed, INIT_STREAM);
        let layers = [0, 1, 2, 3].map(|l| Dense::glorot(widths[l], widths[l + 1], &mut rng));
        Ok(Self {
            widths,
            activation: Activation::Tanh,
            layers,
        })
    }

    pub fn zeros(hidden: [usize; 3], classes: usize) -> Result<Self> {
        let widths = [3, hidden[0], hidden[1], hidden[2], classes];
        check_widths(&widths)?;
        Ok(Self {
            widths,
            activation: Activation::Tanh,
            layers: [0, 1, 2, 3].map(|l| Dense::zeros(widths[l], widths[l + 1])),
        })
    }

    pub fn from_layers(layers: [Dense; 4], activation: Activation) -> Result<Self> {
        let widths = [
            layers[0].inputs,
            layers[0].outputs,
            layers[1].outputs,
            layers[2].outputs,
            layers[3].outputs,
        ];
        check_widths(&widths)?;
        for (l, layer) in layers.iter().enumerate() {
            if layer.inputs != widths[l]
                || layer.outputs != widths[l + 1]
                || layer.weight.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::format(format!("layer {l} has inconsistent shape")));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::format(format!("layer {l} has non-finite values")));
            }
        }
        Ok(Self {
            widths,
            activation,
            layers,
        })
    }

    pub fn widths(&self) -> [usize; 5] {
        self.widths
    }

    pub fn classes(&self) -> usize {
        self.widths[4]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense; 4] {
        &self.layers
    }

    fn run(&self, points: &[Vec3]) -> ForwardCache {
        let [_, h1, h2, h3, c] = self.widths;
        let n = points.len();
        let mut a1 = vec![0.0; n * h1];
        let mut a2 = vec![0.0; n * h2];
        let mut pooled = vec![f64::NEG_INFINITY; h2];
        let mut argmax = vec![0; h2];
        for (p, x) in points.iter().enumerate() {
            let z1 = &mut a1[p * h1..(p + 1) * h1];
            self.layers[0].apply(x, z1);
            z1.iter_mut().for_each(|v| *v = v.tanh());
            let z2 = &mut a2[p * h2..(p + 1) * h2];
            self.layers[1].apply(&a1[p * h1..(p + 1) * h1], z2);
            for (ch, v) in z2.iter_mut().enumerate() {
                *v = v.tanh();
                if *v > pooled[ch] {
                    pooled[ch] = *v;
                    argmax[ch] = p;
                }
            }
        }
        let mut hidden = vec![0.0; h3];
        self.layers[2].apply(&pooled, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = vec![0.0; c];
        self.layers[3].apply(&hidden, &mut logits);
        ForwardCache {
            a1,
            a2,
            pooled,
            argmax,
            h3: hidden,
            logits,
        }
    }

    /// Backpropagates `dlogits` to the input coordinates, optionally
    /// accumulating parameter gradients into `grads`.
    fn backward(
        &self,
        points: &[Vec3],
        cache: &ForwardCache,
        dlogits: &[f64],
        mut grads: Option<&mut [Dense; 4]>,
    ) -> Vec<Vec3> {
        let [_, h1, h2, h3, _] = self.widths;
        let mut dh3 = vec![0.0; h3];
        self.layers[3].back(dlogits, &mut dh3);
        for (d, h) in dh3.iter_mut().zip(&cache.h3) {
            *d *= 1.0 - h * h;
        }
        let mut dpooled = vec![0.0; h2];
        self.layers[2].back(&dh3, &mut dpooled);
        if let Some(g) = grads.as_deref_mut() {
            g[3].accumulate(dlogits, &cache.h3);
            g[2].accumulate(&dh3, &cache.pooled);
        }

        // route each pooled channel to the point that won the max
        let mut routed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (ch, &p) in cache.argmax.iter().enumerate() {
            routed.entry(p).or_insert_with(|| vec![0.0; h2])[ch] += dpooled[ch];
        }

        let mut dx = vec![[0.0; 3]; points.len()];
        let mut da1 = vec![0.0; h1];
        for (p, mut da2) in routed {
            let a2 = &cache.a2[p * h2..(p + 1) * h2];
            for (d, a) in da2.iter_mut().zip(a2) {
                *d *= 1.0 - a * a;
            }
            let a1 = &cache.a1[p * h1..(p + 1) * h1];
            self.layers[1].back(&da2, &mut da1);
            for (d, a) in da1.iter_mut().zip(a1) {
                *d *= 1.0 - a * a;
            }
            self.layers[0].back(&da1, &mut dx[p]);
            if let Some(g) = grads.as_deref_mut() {
                g[1].accumulate(&da2, a1);
                g[0].accumulate(&da1, &points[p]);
            }
        }
        dx
    }

    /// Class logits for a cloud. Invariant to any reordering of the points.
    pub fn forward(&self, cloud: &PointCloud) -> Vec<f64> {
        self.run(cloud.points()).logits
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, cloud: &PointCloud) -> usize {
        argmax(&self.forward(cloud))
    }

    /// Margin loss and its exact gradient with respect to the coordinates.
    pub fn margin_and_gradient(&self, cloud: &PointCloud, label: usize) -> Result<(f64, GradientField)> {
        let cache = self.run(cloud.points());
        let loss = margin_loss(&cache.logits, label)?;
        let rival = rival_class(&cache.logits, label);
        let mut dlogits = vec![0.0; self.classes()];
        dlogits[label] = 1.0;
        dlogits[rival] -= 1.0;
        let rows = self.backward(cloud.points(), &cache, &dlogits, None);
        Ok((
            loss,
            GradientField::new(rows, "margin: pool argmax and rival class frozen"),
        ))
    }

    /// Gradient of the margin loss with respect to the input coordinates.
    pub fn input_gradient(&self, cloud: &PointCloud, label: usize) -> Result<GradientField> {
        Ok(self.margin_and_gradient(cloud, label)?.1)
    }

    pub fn margin(&self, cloud: &PointCloud, label: usize) -> Result<f64> {
        margin_loss(&self.forward(cloud), label)
    }

    /// Serializes into the versioned little-endian checkpoint format.
    ///
    /// Layout: magic `PCADVCK\0`, `u32` version, `u32` width count, the
    /// widths as `u32`, one activation byte, then for each of the four layers
    /// its row-major weights followed by its biases as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in self.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.push(self.activation.tag());
        for layer in &self.layers {
            for v in layer.weight.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a classifier checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.u32()?;
        if count != 5 {
            return Err(Error::format(format!("expected 5 widths, found {count}")));
        }
        let mut widths = [0usize; 5];
        for w in &mut widths {
            *w = r.u32()? as usize;
        }
        check_widths(&widths).map_err(|e| Error::format(e.to_string()))?;
        let activation = Activation::from_tag(r.u8()?)?;
        let mut layers = [0, 1, 2, 3].map(|l| Dense::zeros(widths[l], widths[l + 1]));
        for layer in &mut layers {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.pos
            )));
        }
        Self::from_layers(layers, activation)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn check_widths(widths: &[usize; 5]) -> Result<()> {
    if widths[0] != 3 {
        return Err(Error::invalid(format!("input width must be 3, got {}", widths[0])));
    }
    if widths.contains(&0) {
        return Err(Error::invalid("layer widths must be positive"));
    }
    if widths[4] < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", widths[4])));
    }
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring class other than `label`, lowest index on ties.
pub(crate) fn rival_class(logits: &[f64], label: usize) -> usize {
    let mut best: Option<usize> = None;
    for (k, v) in logits.iter().enumerate() {
        if k == label {
            continue;
        }
        if best.is_none_or(|b| *v > logits[b]) {
            best = Some(k);
        }
    }
    best.expect("at least two classes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: [usize; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 50,
            batch_size: 8,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ClassifierParams,
    /// Mean cross-entropy of each epoch's minibatches, measured before each
    /// update.
    pub epoch_losses: Vec<f64>,
    pub final_accuracy: f64,
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn dataset_stats(params: &ClassifierParams, data: &[(PointCloud, usize)]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (cloud, label) in data {
        let logits = params.forward(cloud);
        loss += softmax_xent(&logits, *label).0;
        if argmax(&logits) == *label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Softmax cross-entropy minimization with momentum SGD. Deterministic per
/// seed: initialization and per-epoch shuffles come from fixed streams.
pub fn train(data: &[(PointCloud, usize)], cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("training needs at least one epoch"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let classes = data.iter().map(|d| d.1).max().map_or(0, |m| m + 1);
    let distinct = data
        .iter()
        .map(|d| d.1)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if distinct < 2 {
        return Err(Error::invalid("training data must contain at least two classes"));
    }

    let mut params = ClassifierParams::init(cfg.hidden, classes, cfg.seed)?;
    let mut velocity = params.layers.clone().map(|l| Dense::zeros(l.inputs, l.outputs));
    let mut grads = velocity.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = seed::rng(cfg.seed, SHUFFLE_STREAM);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut running = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in grads.iter_mut() {
                g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v = 0.0);
            }
            for &idx in batch {
                let (cloud, label) = &data[idx];
                let cache = params.run(cloud.points());
                let (loss, dlogits) = softmax_xent(&cache.logits, *label);
                running += loss;
                params.backward(cloud.points(), &cache, &dlogits, Some(&mut grads));
            }
            let scale = 1.0 / batch.len() as f64;
            for ((layer, vel), g) in params.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                let params_iter = layer.weight.iter_mut().chain(layer.bias.iter_mut());
                let vel_iter = vel.weight.iter_mut().chain(vel.bias.iter_mut());
                let grad_iter = g.weight.iter().chain(&g.bias);
                for ((p, v), gr) in params_iter.zip(vel_iter).zip(grad_iter) {
                    *v = cfg.momentum * *v + gr * scale;
                    *p -= cfg.learning_rate * *v;
                }
            }
        }
        epoch_losses.push(running / data.len() as f64);
    }
    let final_accuracy = dataset_stats(&params, data).1;
    Ok(TrainReport {
        params,
        epoch_losses,
        final_accuracy,
    })
}
