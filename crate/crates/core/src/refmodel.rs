//! Small deterministic token classifier.
//!
//! Architecture: embedding lookup, mean pooling over the last `context_len`
//! tokens, `layer_count` dense ReLU layers of width `hidden_dim`, and a linear
//! head over `class_count` classes. Dropout is inverted dropout applied after
//! each hidden nonlinearity. Everything is `f64` and every random draw comes
//! from a seeded ChaCha stream, so training is bitwise reproducible.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{argmax, softmax_row, LogitMatrix, TokenSequence};

const MAGIC: &[u8; 4] = b"DCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Output classes; class `k` predicts vocabulary index `k`.
    pub class_count: usize,
    pub context_len: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            class_count: 21,
            context_len: 16,
            hidden_dim: 64,
            layer_count: 4,
            dropout_rate: 0.1,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.class_count < 2 || self.class_count > self.vocab_size {
            return Err(Error::invalid(format!(
                "class_count must lie in [2, vocab_size], got {}",
                self.class_count
            )));
        }
        if self.hidden_dim < 2 {
            return Err(Error::invalid("hidden_dim must be at least 2"));
        }
        if self.layer_count < 2 {
            return Err(Error::invalid("layer_count must be at least 2"));
        }
        if self.context_len == 0 || self.batch_size == 0 {
            return Err(Error::invalid("context_len and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("class_count", self.class_count),
            ("context_len", self.context_len),
            ("hidden_dim", self.hidden_dim),
            ("layer_count", self.layer_count),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if u32::try_from(v).is_err() {
                return Err(Error::invalid(format!("{name} does not fit in u32")));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u32) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Fully connected layer, `outputs x inputs` weights stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (gain / inputs as f64).sqrt()).expect("finite std");
        Self {
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
            inputs,
            outputs,
        }
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs))
            .zip(&self.bias)
        {
            *o = b + dot(row, x);
        }
    }

    pub fn row(&self, neuron: usize) -> &[f64] {
        &self.weights[neuron * self.inputs..(neuron + 1) * self.inputs]
    }

    fn row_mut(&mut self, neuron: usize) -> &mut [f64] {
        &mut self.weights[neuron * self.inputs..(neuron + 1) * self.inputs]
    }

    fn swap_rows(&mut self, i: usize, j: usize) {
        for k in 0..self.inputs {
            self.weights.swap(i * self.inputs + k, j * self.inputs + k);
        }
        self.bias.swap(i, j);
    }

    fn swap_columns(&mut self, i: usize, j: usize) {
        for row in self.weights.chunks_exact_mut(self.inputs) {
            row.swap(i, j);
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Complete parameter state of a trained (or mutated) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `vocab_size x hidden_dim`, row-major.
    pub embedding: Vec<f64>,
    pub layers: Vec<Dense>,
    pub head: Dense,
    pub dev_accuracy: f64,
}

/// Logits plus the post-nonlinearity activation of every hidden layer,
/// ordered input to output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    pub layer_activations: Vec<Vec<f64>>,
}

/// Per-layer inverted-dropout multipliers (`0` or `1 / (1 - rate)`).
#[derive(Debug, Clone)]
pub struct DropoutMasks(Vec<Vec<f64>>);

impl DropoutMasks {
    /// One thinned sub-network drawn from `seed`; the same masks apply to every
    /// sample of a batch.
    pub fn sample(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::draw(config, &mut rng)
    }

    fn draw(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let rate = config.dropout_rate;
        let keep_scale = 1.0 / (1.0 - rate);
        DropoutMasks(
            (0..config.layer_count)
                .map(|_| {
                    (0..config.hidden_dim)
                        .map(|_| {
                            if rate > 0.0 && rng.random::<f64>() < rate {
                                0.0
                            } else {
                                keep_scale
                            }
                        })
                        .collect()
                })
                .collect(),
        )
    }
}

impl Checkpoint {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(config.seed));
        let h = config.hidden_dim;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let embedding = (0..config.vocab_size * h).map(|_| normal.sample(&mut rng)).collect();
        let layers = (0..config.layer_count)
            .map(|_| Dense::init(h, h, 2.0, &mut rng))
            .collect();
        let head = Dense::init(h, config.class_count, 1.0, &mut rng);
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            head,
            dev_accuracy: f64::NAN,
        })
    }

    pub fn train_seed(&self) -> u32 {
        self.config.seed
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.layers.iter().map(Dense::param_count).sum::<usize>() + self.head.param_count()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.iter().all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .chain(std::iter::once(&self.head))
                .all(|d| d.weights.iter().chain(&d.bias).all(|v| v.is_finite()))
    }

    /// Exact equality on the bit patterns of every parameter.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.config == other.config
            && self.dev_accuracy.to_bits() == other.dev_accuracy.to_bits()
            && same(&self.embedding, &other.embedding)
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .chain(std::iter::once(&self.head))
                .zip(other.layers.iter().chain(std::iter::once(&other.head)))
                .all(|(a, b)| same(&a.weights, &b.weights) && same(&a.bias, &b.bias))
    }

    fn check_tokens(&self, seq: &TokenSequence) -> Result<()> {
        if seq.tokens.is_empty() {
            return Err(Error::invalid(format!("sequence {} has no tokens", seq.id)));
        }
        if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "sequence {}: token {t} out of range for vocabulary of {}",
                seq.id, self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn context<'a>(&self, seq: &'a TokenSequence) -> &'a [u32] {
        let n = seq.tokens.len();
        &seq.tokens[n.saturating_sub(self.config.context_len)..]
    }

    fn pool(&self, seq: &TokenSequence, out: &mut [f64]) {
        let h = self.config.hidden_dim;
        let ctx = self.context(seq);
        out.iter_mut().for_each(|v| *v = 0.0);
        for &t in ctx {
            let e = &self.embedding[t as usize * h..(t as usize + 1) * h];
            for (o, v) in out.iter_mut().zip(e) {
                *o += v;
            }
        }
        let n = ctx.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }

    fn trace_with(&self, seq: &TokenSequence, masks: Option<&DropoutMasks>) -> ForwardTrace {
        let h = self.config.hidden_dim;
        let mut a = vec![0.0; h];
        self.pool(seq, &mut a);
        let mut acts = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; h];
            layer.apply(&a, &mut z);
            for (k, v) in z.iter_mut().enumerate() {
                *v = v.max(0.0);
                if let Some(m) = masks {
                    *v *= m.0[l][k];
                }
            }
            acts.push(z.clone());
            a = z;
        }
        let mut logits = vec![0.0; self.config.class_count];
        self.head.apply(&a, &mut logits);
        ForwardTrace {
            logits,
            layer_activations: acts,
        }
    }

    /// Single-sample forward pass. With `dropout_on`, masks are drawn from
    /// `rng_seed`.
    pub fn forward(&self, seq: &TokenSequence, dropout_on: bool, rng_seed: u64) -> Result<ForwardTrace> {
        self.check_tokens(seq)?;
        let masks = dropout_on.then(|| DropoutMasks::sample(&self.config, rng_seed));
        Ok(self.trace_with(seq, masks.as_ref()))
    }

    /// Logits for a batch. `dropout_seed` selects one thinned network shared by
    /// the whole batch; `None` is the deterministic network.
    pub fn logits(&self, seqs: &[TokenSequence], dropout_seed: Option<u64>) -> Result<LogitMatrix> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty split"));
        }
        seqs.iter().try_for_each(|s| self.check_tokens(s))?;
        let masks = dropout_seed.map(|s| DropoutMasks::sample(&self.config, s));
        let rows: Vec<Vec<f64>> = seqs
            .par_iter()
            .map(|s| self.trace_with(s, masks.as_ref()).logits)
            .collect();
        LogitMatrix::new(rows.len(), self.config.class_count, rows.concat())
    }

    /// Deterministic hidden activations, indexed `[layer][sample]`.
    pub fn activations(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<Vec<f64>>>> {
        seqs.iter().try_for_each(|s| self.check_tokens(s))?;
        let traces: Vec<ForwardTrace> = seqs.par_iter().map(|s| self.trace_with(s, None)).collect();
        let mut by_layer = vec![Vec::with_capacity(seqs.len()); self.layers.len()];
        for t in traces {
            for (l, a) in t.layer_activations.into_iter().enumerate() {
                by_layer[l].push(a);
            }
        }
        Ok(by_layer)
    }

    pub fn accuracy(&self, seqs: &[TokenSequence]) -> Result<f64> {
        let logits = self.logits(seqs, None)?;
        let hits = logits
            .iter_rows()
            .zip(seqs)
            .filter(|(r, s)| argmax(r) == s.target as usize)
            .count();
        Ok(hits as f64 / seqs.len() as f64)
    }
}

fn check_split(name: &str, split: &[TokenSequence], config: &ModelConfig) -> Result<()> {
    if split.is_empty() {
        return Err(Error::invalid(format!("{name} split is empty")));
    }
    for s in split {
        s.validate(config.vocab_size)?;
        if s.target as usize >= config.class_count {
            return Err(Error::invalid(format!(
                "{name} sequence {}: target {} is not one of the {} classes",
                s.id, s.target, config.class_count
            )));
        }
    }
    Ok(())
}

struct Grads {
    embedding: Vec<f64>,
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    head: (Vec<f64>, Vec<f64>),
}

impl Grads {
    fn zeros(ck: &Checkpoint) -> Self {
        Self {
            embedding: vec![0.0; ck.embedding.len()],
            layers: ck
                .layers
                .iter()
                .map(|d| (vec![0.0; d.weights.len()], vec![0.0; d.bias.len()]))
                .collect(),
            head: (vec![0.0; ck.head.weights.len()], vec![0.0; ck.head.bias.len()]),
        }
    }

    fn clear(&mut self) {
        self.embedding.iter_mut().for_each(|v| *v = 0.0);
        for (w, b) in self.layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Accumulates the cross-entropy gradient of one sample; returns its loss.
fn backprop(ck: &Checkpoint, seq: &TokenSequence, masks: &DropoutMasks, g: &mut Grads) -> f64 {
    let h = ck.config.hidden_dim;
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(ck.layers.len() + 1);
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(ck.layers.len());
    let mut a = vec![0.0; h];
    ck.pool(seq, &mut a);
    for (l, layer) in ck.layers.iter().enumerate() {
        let mut z = vec![0.0; h];
        layer.apply(&a, &mut z);
        let out: Vec<f64> = z.iter().zip(&masks.0[l]).map(|(v, m)| v.max(0.0) * m).collect();
        inputs.push(a);
        pre.push(z);
        a = out;
    }
    let mut logits = vec![0.0; ck.config.class_count];
    ck.head.apply(&a, &mut logits);
    let mut p = vec![0.0; logits.len()];
    softmax_row(&logits, 1.0, &mut p);
    let y = seq.target as usize;
    let loss = -p[y].max(f64::MIN_POSITIVE).ln();
    p[y] -= 1.0;
    let dlogits = p;

    let (hw, hb) = &mut g.head;
    let mut da = vec![0.0; h];
    for (c, &d) in dlogits.iter().enumerate() {
        hb[c] += d;
        let row = &mut hw[c * h..(c + 1) * h];
        for (w, x) in row.iter_mut().zip(&a) {
            *w += d * x;
        }
        for (acc, w) in da.iter_mut().zip(ck.head.row(c)) {
            *acc += d * w;
        }
    }
    for l in (0..ck.layers.len()).rev() {
        let dz: Vec<f64> = da
            .iter()
            .zip(&masks.0[l])
            .zip(&pre[l])
            .map(|((d, m), z)| if *z > 0.0 { d * m } else { 0.0 })
            .collect();
        let (gw, gb) = &mut g.layers[l];
        let x = &inputs[l];
        let mut prev = vec![0.0; h];
        for (o, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            for (w, xi) in gw[o * h..(o + 1) * h].iter_mut().zip(x) {
                *w += d * xi;
            }
            for (acc, w) in prev.iter_mut().zip(ck.layers[l].row(o)) {
                *acc += d * w;
            }
        }
        da = prev;
    }
    let ctx = ck.context(seq);
    let scale = 1.0 / ctx.len() as f64;
    for &t in ctx {
        let ge = &mut g.embedding[t as usize * h..(t as usize + 1) * h];
        for (e, d) in ge.iter_mut().zip(&da) {
            *e += d * scale;
        }
    }
    loss
}

fn sgd_step(ck: &mut Checkpoint, g: &Grads, step: f64) {
    for (p, d) in ck.embedding.iter_mut().zip(&g.embedding) {
        *p -= step * d;
    }
    for (layer, (gw, gb)) in ck
        .layers
        .iter_mut()
        .chain(std::iter::once(&mut ck.head))
        .zip(g.layers.iter().chain(std::iter::once(&g.head)))
    {
        for (p, d) in layer.weights.iter_mut().zip(gw) {
            *p -= step * d;
        }
        for (p, d) in layer.bias.iter_mut().zip(gb) {
            *p -= step * d;
        }
    }
}

/// Mini-batch SGD on cross-entropy with dropout active. Single-threaded so
/// the result is a pure function of `(config, train_set, dev_set)`.
pub fn train(config: &ModelConfig, train_set: &[TokenSequence], dev_set: &[TokenSequence]) -> Result<Checkpoint> {
    config.validate()?;
    check_split("train", train_set, config)?;
    check_split("dev", dev_set, config)?;
    let mut ck = Checkpoint::init(config)?;
    // Separate stream from initialization so changing the architecture
    // does not reshuffle the data order.
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(config.seed) ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = Grads::zeros(&ck);
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            let mut loss = 0.0;
            for &i in batch {
                let masks = DropoutMasks::draw(config, &mut rng);
                loss += backprop(&ck, &train_set[i], &masks, &mut grads);
            }
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    step,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            sgd_step(&mut ck, &grads, config.learning_rate / batch.len() as f64);
            step += 1;
        }
    }
    if !ck.is_finite() {
        return Err(Error::TrainingFailure {
            step,
            reason: "parameters diverged".into(),
        });
    }
    ck.dev_accuracy = ck.accuracy(dev_set)?;
    Ok(ck)
}

/// Model mutation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MutationOperator {
    /// Gaussian fuzzing of a fraction of each hidden layer's weights.
    #[serde(rename = "GF")]
    GaussianFuzzing,
    /// Shuffles the incoming weights of a fraction of neurons.
    #[serde(rename = "WS")]
    WeightShuffling,
    /// Swaps two neurons per hidden layer (incoming rows, biases and
    /// outgoing columns), leaving the computed function unchanged.
    #[serde(rename = "NS")]
    NeuronSwitch,
    /// Negates the pre-activation of a fraction of neurons.
    #[serde(rename = "NAI")]
    NeuronActivationInverse,
}

impl MutationOperator {
    pub const ALL: [MutationOperator; 4] = [
        MutationOperator::GaussianFuzzing,
        MutationOperator::WeightShuffling,
        MutationOperator::NeuronSwitch,
        MutationOperator::NeuronActivationInverse,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MutationOperator::GaussianFuzzing => "GF",
            MutationOperator::WeightShuffling => "WS",
            MutationOperator::NeuronSwitch => "NS",
            MutationOperator::NeuronActivationInverse => "NAI",
        }
    }
}

impl fmt::Display for MutationOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MutationOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown mutation operator {s:?}")))
    }
}

pub const DEFAULT_MUTATION_RATIO: f64 = 0.25;
/// Gaussian fuzzing noise, as a multiple of each layer's weight std.
pub const DEFAULT_FUZZ_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    pub operator: MutationOperator,
    pub ratio: f64,
    pub fuzz_scale: f64,
}

impl MutationSpec {
    pub fn new(operator: MutationOperator) -> Self {
        Self {
            operator,
            ratio: DEFAULT_MUTATION_RATIO,
            fuzz_scale: DEFAULT_FUZZ_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "mutation ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if !(self.fuzz_scale >= 0.0 && self.fuzz_scale.is_finite()) {
            return Err(Error::invalid("fuzz scale must be non-negative"));
        }
        Ok(())
    }
}

fn fraction(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Applies `operator` with the default fuzz scale.
pub fn mutate(ckpt: &Checkpoint, operator: MutationOperator, ratio: f64, seed: u64) -> Result<Checkpoint> {
    mutate_with(
        ckpt,
        &MutationSpec {
            ratio,
            ..MutationSpec::new(operator)
        },
        seed,
    )
}

/// Returns a mutated copy of `ckpt`; the source is untouched. Only hidden
/// layers are mutated, except that a neuron switch in the last hidden layer
/// also permutes the matching head columns.
pub fn mutate_with(ckpt: &Checkpoint, spec: &MutationSpec, seed: u64) -> Result<Checkpoint> {
    spec.validate()?;
    let mut out = ckpt.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = out.layers.len();
    for l in 0..n_layers {
        let hidden = out.layers[l].outputs;
        match spec.operator {
            MutationOperator::GaussianFuzzing => {
                let layer = &mut out.layers[l];
                let k = fraction(spec.ratio, layer.weights.len());
                let picked = index::sample(&mut rng, layer.weights.len(), k);
                let std = spec.fuzz_scale * population_std(&layer.weights);
                if std > 0.0 {
                    let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                    for i in picked.iter() {
                        layer.weights[i] += noise.sample(&mut rng);
                    }
                }
            }
            MutationOperator::WeightShuffling => {
                let layer = &mut out.layers[l];
                let picked = index::sample(&mut rng, hidden, fraction(spec.ratio, hidden));
                for n in picked.iter() {
                    layer.row_mut(n).shuffle(&mut rng);
                }
            }
            MutationOperator::NeuronSwitch => {
                let picked = index::sample(&mut rng, hidden, 2);
                let (i, j) = (picked.index(0), picked.index(1));
                out.layers[l].swap_rows(i, j);
                if l + 1 < n_layers {
                    out.layers[l + 1].swap_columns(i, j);
                } else {
                    out.head.swap_columns(i, j);
                }
            }
            MutationOperator::NeuronActivationInverse => {
                let layer = &mut out.layers[l];
                let picked = index::sample(&mut rng, hidden, fraction(spec.ratio, hidden));
                for n in picked.iter() {
                    layer.row_mut(n).iter_mut().for_each(|w| *w = -*w);
                    layer.bias[n] = -layer.bias[n];
                }
            }
        }
    }
    Ok(out)
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct ByteReader<'a>(&'a [u8]);

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    /// Binary container: `DCKP`, version, config (u32 / f64, little endian),
    /// then every tensor row-major as little-endian f64 in declaration order:
    /// embedding, each hidden layer's weights and bias, head weights and bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter(Vec::with_capacity(64 + 8 * self.param_count()));
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        for v in [
            c.vocab_size,
            c.class_count,
            c.context_len,
            c.hidden_dim,
            c.layer_count,
            c.epochs,
            c.batch_size,
            c.seed as usize,
        ] {
            w.u32(v);
        }
        w.f64(c.dropout_rate);
        w.f64(c.learning_rate);
        w.f64(self.dev_accuracy);
        w.tensor(&self.embedding);
        for d in self.layers.iter().chain(std::iter::once(&self.head)) {
            w.tensor(&d.weights);
            w.tensor(&d.bias);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig {
            vocab_size: r.u32()?,
            class_count: r.u32()?,
            context_len: r.u32()?,
            hidden_dim: r.u32()?,
            layer_count: r.u32()?,
            epochs: r.u32()?,
            batch_size: r.u32()?,
            seed: r.u32()? as u32,
            dropout_rate: r.f64()?,
            learning_rate: r.f64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let dev_accuracy = r.f64()?;
        let h = config.hidden_dim;
        let embedding = r.tensor(config.vocab_size * h)?;
        let mut dense = |inputs: usize, outputs: usize| -> Result<Dense> {
            Ok(Dense {
                weights: r.tensor(inputs * outputs)?,
                bias: r.tensor(outputs)?,
                inputs,
                outputs,
            })
        };
        let layers = (0..config.layer_count)
            .map(|_| dense(h, h))
            .collect::<Result<Vec<_>>>()?;
        let head = dense(h, config.class_count)?;
        if !r.0.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.0.len())));
        }
        Ok(Self {
            config,
            embedding,
            layers,
            head,
            dev_accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
