//! Probabilistic calibration methods.
//!
//! Each method turns a trained checkpoint and an evaluation split into a
//! [`CalibrationResult`]. Methods that fit something once (temperature,
//! ensemble members, mutants, probes) expose a reusable fitted object so the
//! fit can be shared across several evaluation splits; the free functions
//! wrap fit-then-apply for a single split.
//!
//! Member outputs are combined by averaging logits before the softmax. The
//! per-member probabilities are kept separately because the sampling-based
//! uncertainty scores operate on them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{argmax, softmax, softmax_row, LogitMatrix, ProbMatrix, TokenSequence};
use crate::refmodel::{self, Checkpoint, Dense, ModelConfig, MutationSpec};
use crate::serial;

pub const DEFAULT_MCD_SAMPLES: usize = 10;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;
pub const DEFAULT_MUTANT_COUNT: usize = 100;
pub const TEMPERATURE_BOUNDS: (f64, f64) = (0.05, 10.0);
pub const TEMPERATURE_TOLERANCE: f64 = 1e-4;
pub const PROBE_EPOCHS: usize = 10;
pub const PROBE_LEARNING_RATE: f64 = 0.1;
pub const PROBE_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "Base")]
    Vanilla,
    TS,
    MCD,
    DE,
    MT,
    DS,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vanilla,
        Method::TS,
        Method::MCD,
        Method::DE,
        Method::MT,
        Method::DS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "Base",
            Method::TS => "TS",
            Method::MCD => "MCD",
            Method::DE => "DE",
            Method::MT => "MT",
            Method::DS => "DS",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "base" | "vanilla" => Ok(Method::Vanilla),
            _ => Method::ALL
                .into_iter()
                .find(|m| m.name().eq_ignore_ascii_case(s))
                .ok_or_else(|| Error::invalid(format!("unknown calibration method {s:?}"))),
        }
    }
}

/// Method parameters; only the fields relevant to the method are set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcd_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutant_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutation: Option<MutationSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tap_layers: Option<Vec<usize>>,
}

/// Wall-clock cost, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub calibration_seconds: f64,
    pub ue_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub method: Method,
    pub params: CalibrationParams,
    pub overhead: Overhead,
    /// Calibrated logits; absent when the result was read back from JSON.
    pub logits: Option<LogitMatrix>,
    pub probs: ProbMatrix,
    /// Per-member (MCD, DE) or per-snapshot (DS) distributions.
    pub member_probs: Option<Vec<ProbMatrix>>,
    /// Per-mutant predicted labels (MT), indexed `[mutant][sample]`.
    pub member_labels: Option<Vec<Vec<usize>>>,
}

impl CalibrationResult {
    /// Softmax of `logits` at `params.temperature` (default 1).
    pub fn from_logits(method: Method, params: CalibrationParams, logits: LogitMatrix) -> Result<Self> {
        let probs = softmax(&logits, params.temperature.unwrap_or(1.0))?;
        Ok(Self {
            method,
            params,
            overhead: Overhead::default(),
            logits: Some(logits),
            probs,
            member_probs: None,
            member_labels: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn predicted(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ResultJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ResultJsonOwned = serde_json::from_str(text)?;
        let probs = ProbMatrix::from_rows(&raw.probs)?;
        let member_probs = raw
            .member_probs
            .map(|ms| ms.iter().map(|m| ProbMatrix::from_rows(m)).collect::<Result<Vec<_>>>())
            .transpose()?;
        if let Some(ms) = &member_probs {
            if ms
                .iter()
                .any(|m| m.rows() != probs.rows() || m.classes() != probs.classes())
            {
                return Err(Error::Format("member_probs shape differs from probs".into()));
            }
        }
        Ok(Self {
            method: raw.method,
            params: raw.params,
            overhead: raw.overhead,
            logits: None,
            probs,
            member_probs,
            member_labels: None,
        })
    }
}

#[derive(Serialize)]
struct ResultJson<'a> {
    method: Method,
    params: &'a CalibrationParams,
    overhead: Overhead17,
    #[serde(serialize_with = "serial::matrix_17")]
    probs: Vec<Vec<f64>>,
    #[serde(serialize_with = "serial::opt_matrices_17")]
    member_probs: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Serialize)]
struct Overhead17 {
    #[serde(serialize_with = "serial::f64_17")]
    calibration_seconds: f64,
    #[serde(serialize_with = "serial::f64_17")]
    ue_seconds: f64,
}

impl<'a> From<&'a CalibrationResult> for ResultJson<'a> {
    fn from(r: &'a CalibrationResult) -> Self {
        Self {
            method: r.method,
            params: &r.params,
            overhead: Overhead17 {
                calibration_seconds: r.overhead.calibration_seconds,
                ue_seconds: r.overhead.ue_seconds,
            },
            probs: r.probs.to_rows(),
            member_probs: r
                .member_probs
                .as_ref()
                .map(|ms| ms.iter().map(ProbMatrix::to_rows).collect()),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultJsonOwned {
    method: Method,
    params: CalibrationParams,
    overhead: Overhead,
    probs: Vec<Vec<f64>>,
    member_probs: Option<Vec<Vec<Vec<f64>>>>,
}

pub fn labels(split: &[TokenSequence]) -> Vec<usize> {
    split.iter().map(|s| s.target as usize).collect()
}

fn member_softmax(members: &[LogitMatrix]) -> Result<Vec<ProbMatrix>> {
    members.iter().map(|m| softmax(m, 1.0)).collect()
}

/// Maximum softmax probability of the unmodified model.
pub fn vanilla(ckpt: &Checkpoint, split: &[TokenSequence]) -> Result<CalibrationResult> {
    let start = Instant::now();
    let logits = ckpt.logits(split, None)?;
    let mut r = CalibrationResult::from_logits(Method::Vanilla, CalibrationParams::default(), logits)?;
    r.overhead.ue_seconds = start.elapsed().as_secs_f64();
    Ok(r)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / t)`.
pub fn mean_nll(logits: &LogitMatrix, labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|l| ((l - max) / t).exp()).sum::<f64>().ln();
            lse - (row[y] - max) / t
        })
        .sum();
    total / labels.len() as f64
}

/// Golden-section search for the NLL-minimizing temperature on
/// [`TEMPERATURE_BOUNDS`]. The NLL is convex in `1/T`, hence unimodal in `T`.
pub fn fit_temperature_logits(logits: &LogitMatrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("empty validation split"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::invalid("label count differs from logit rows"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.classes()) {
        return Err(Error::invalid(format!(
            "label {y} outside {} classes",
            logits.classes()
        )));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_BOUNDS;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = mean_nll(logits, labels, c);
    let mut fd = mean_nll(logits, labels, d);
    while b - a > TEMPERATURE_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = mean_nll(logits, labels, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = mean_nll(logits, labels, d);
        }
    }
    Ok((a + b) / 2.0)
}

pub fn fit_temperature(ckpt: &Checkpoint, val_split: &[TokenSequence]) -> Result<f64> {
    if val_split.is_empty() {
        return Err(Error::invalid("empty validation split"));
    }
    let logits = ckpt.logits(val_split, None)?;
    fit_temperature_logits(&logits, &labels(val_split))
}

/// Softmax of the model logits at a fitted temperature.
pub fn apply_temperature(ckpt: &Checkpoint, temperature: f64, split: &[TokenSequence]) -> Result<CalibrationResult> {
    let start = Instant::now();
    let logits = ckpt.logits(split, None)?;
    let params = CalibrationParams {
        temperature: Some(temperature),
        ..Default::default()
    };
    let mut r = CalibrationResult::from_logits(Method::TS, params, logits)?;
    r.overhead.ue_seconds = start.elapsed().as_secs_f64();
    Ok(r)
}

pub fn temperature_scaling(
    ckpt: &Checkpoint,
    val_split: &[TokenSequence],
    split: &[TokenSequence],
) -> Result<CalibrationResult> {
    let start = Instant::now();
    let t = fit_temperature(ckpt, val_split)?;
    let fit_seconds = start.elapsed().as_secs_f64();
    let mut r = apply_temperature(ckpt, t, split)?;
    r.overhead.calibration_seconds = fit_seconds;
    Ok(r)
}

fn combine(method: Method, params: CalibrationParams, members: &[LogitMatrix]) -> Result<CalibrationResult> {
    let mean = LogitMatrix::mean(members)?;
    let mut r = CalibrationResult::from_logits(method, params, mean)?;
    r.member_probs = Some(member_softmax(members)?);
    Ok(r)
}

/// Averages the logits of `samples` thinned networks; member `t` uses dropout
/// seed `base_seed + t`.
pub fn mc_dropout(
    ckpt: &Checkpoint,
    split: &[TokenSequence],
    samples: usize,
    base_seed: u64,
) -> Result<CalibrationResult> {
    if samples < 2 {
        return Err(Error::invalid(format!(
            "MC dropout needs at least 2 samples, got {samples}"
        )));
    }
    let start = Instant::now();
    let members = (0..samples as u64)
        .into_par_iter()
        .map(|t| ckpt.logits(split, Some(base_seed + t)))
        .collect::<Result<Vec<_>>>()?;
    let params = CalibrationParams {
        mcd_samples: Some(samples),
        ..Default::default()
    };
    let mut r = combine(Method::MCD, params, &members)?;
    r.overhead.calibration_seconds = start.elapsed().as_secs_f64();
    Ok(r)
}

/// Independently trained, seed-varied members of one architecture.
#[derive(Debug, Clone)]
pub struct DeepEnsemble {
    pub members: Vec<Checkpoint>,
    /// Mean wall-clock training time per member.
    pub mean_train_seconds: f64,
}

impl DeepEnsemble {
    /// Trains one member per config. Configs must differ only in seed and the
    /// seeds must be distinct.
    pub fn train(configs: &[ModelConfig], train: &[TokenSequence], dev: &[TokenSequence]) -> Result<Self> {
        if configs.len() < 2 {
            return Err(Error::invalid(format!(
                "an ensemble needs at least 2 members, got {}",
                configs.len()
            )));
        }
        let seeds: BTreeSet<u32> = configs.iter().map(|c| c.seed).collect();
        if seeds.len() != configs.len() {
            return Err(Error::invalid("ensemble member seeds must be distinct"));
        }
        let first = &configs[0];
        if configs.iter().any(|c| c.with_seed(first.seed) != *first) {
            return Err(Error::invalid("ensemble members must differ only in seed"));
        }
        let trained = configs
            .par_iter()
            .map(|c| {
                let start = Instant::now();
                refmodel::train(c, train, dev).map(|ck| (ck, start.elapsed().as_secs_f64()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_train_seconds = trained.iter().map(|(_, s)| s).sum::<f64>() / trained.len() as f64;
        Ok(Self {
            members: trained.into_iter().map(|(ck, _)| ck).collect(),
            mean_train_seconds,
        })
    }

    /// Wraps already-trained members without the independence checks.
    pub fn from_members(members: Vec<Checkpoint>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid("an ensemble needs at least 2 members"));
        }
        Ok(Self {
            members,
            mean_train_seconds: 0.0,
        })
    }

    pub fn calibrate(&self, split: &[TokenSequence]) -> Result<CalibrationResult> {
        let start = Instant::now();
        let members = self
            .members
            .par_iter()
            .map(|m| m.logits(split, None))
            .collect::<Result<Vec<_>>>()?;
        let params = CalibrationParams {
            ensemble_size: Some(self.members.len()),
            ..Default::default()
        };
        let mut r = combine(Method::DE, params, &members)?;
        r.overhead.calibration_seconds = self.mean_train_seconds + start.elapsed().as_secs_f64();
        Ok(r)
    }
}

pub fn deep_ensemble(
    configs: &[ModelConfig],
    train: &[TokenSequence],
    dev: &[TokenSequence],
    split: &[TokenSequence],
) -> Result<CalibrationResult> {
    DeepEnsemble::train(configs, train, dev)?.calibrate(split)
}

/// A fixed set of mutants of one checkpoint; mutant `i` uses seed
/// `base_seed + i`.
#[derive(Debug, Clone)]
pub struct MutantPool {
    pub spec: MutationSpec,
    pub mutants: Vec<Checkpoint>,
    pub build_seconds: f64,
}

impl MutantPool {
    pub fn build(ckpt: &Checkpoint, spec: MutationSpec, count: usize, base_seed: u64) -> Result<Self> {
        if count < 1 {
            return Err(Error::invalid("mutant count must be at least 1"));
        }
        spec.validate()?;
        let start = Instant::now();
        let mutants = (0..count as u64)
            .into_par_iter()
            .map(|i| refmodel::mutate_with(ckpt, &spec, base_seed + i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            mutants,
            build_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Mean mutant logits. `build_seconds` is not included in the returned
    /// overhead; callers charge it once per pool.
    pub fn calibrate(&self, split: &[TokenSequence]) -> Result<CalibrationResult> {
        let start = Instant::now();
        let members = self
            .mutants
            .par_iter()
            .map(|m| m.logits(split, None))
            .collect::<Result<Vec<_>>>()?;
        let params = CalibrationParams {
            mutant_count: Some(self.mutants.len()),
            mutation: Some(self.spec),
            ..Default::default()
        };
        let mean = LogitMatrix::mean(&members)?;
        let mut r = CalibrationResult::from_logits(Method::MT, params, mean)?;
        r.member_labels = Some(members.iter().map(LogitMatrix::argmax_rows).collect());
        r.overhead.calibration_seconds = start.elapsed().as_secs_f64();
        Ok(r)
    }
}

pub fn mutation_testing(
    ckpt: &Checkpoint,
    split: &[TokenSequence],
    spec: MutationSpec,
    mutant_count: usize,
    base_seed: u64,
) -> Result<CalibrationResult> {
    let pool = MutantPool::build(ckpt, spec, mutant_count, base_seed)?;
    let mut r = pool.calibrate(split)?;
    r.overhead.calibration_seconds += pool.build_seconds;
    Ok(r)
}

/// Linear classifier trained on one hidden layer's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub layer: usize,
    pub linear: Dense,
    pub train_accuracy: f64,
}

impl Probe {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.linear
            .weights
            .chunks_exact(self.linear.inputs)
            .zip(&self.linear.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Zero-initialized softmax regression, mini-batch SGD on cross-entropy.
    pub fn fit(layer: usize, features: &[Vec<f64>], labels: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let dim = features.first().map_or(0, Vec::len);
        if features.is_empty() || dim == 0 {
            return Err(Error::invalid("probe needs non-empty features"));
        }
        let linear = Dense {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            inputs: dim,
            outputs: classes,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..features.len()).collect();
        let mut gw = vec![0.0; linear.weights.len()];
        let mut gb = vec![0.0; classes];
        let mut p = vec![0.0; classes];
        let mut probe = Probe {
            layer,
            linear,
            train_accuracy: 0.0,
        };
        for _ in 0..PROBE_EPOCHS {
            order.shuffle(&mut rng);
            for batch in order.chunks(PROBE_BATCH_SIZE) {
                gw.iter_mut().for_each(|v| *v = 0.0);
                gb.iter_mut().for_each(|v| *v = 0.0);
                for &i in batch {
                    let x = &features[i];
                    softmax_row(&probe.logits(x), 1.0, &mut p);
                    p[labels[i]] -= 1.0;
                    for (c, &d) in p.iter().enumerate() {
                        gb[c] += d;
                        for (g, v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                            *g += d * v;
                        }
                    }
                }
                let step = PROBE_LEARNING_RATE / batch.len() as f64;
                for (w, g) in probe.linear.weights.iter_mut().zip(&gw) {
                    *w -= step * g;
                }
                for (b, g) in probe.linear.bias.iter_mut().zip(&gb) {
                    *b -= step * g;
                }
            }
        }
        if probe.linear.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainingFailure {
                step: PROBE_EPOCHS,
                reason: format!("probe on layer {layer} diverged"),
            });
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| argmax(&probe.logits(x)) == y)
            .count();
        probe.train_accuracy = hits as f64 / features.len() as f64;
        Ok(probe)
    }
}

/// Per-layer snapshot probes over a frozen checkpoint.
#[derive(Debug, Clone)]
pub struct Dissector {
    pub probes: Vec<Probe>,
    pub fit_seconds: f64,
}

impl Dissector {
    pub fn default_taps(ckpt: &Checkpoint) -> Vec<usize> {
        (0..ckpt.config.layer_count).collect()
    }

    pub fn fit(ckpt: &Checkpoint, train_split: &[TokenSequence], tap_layers: &[usize]) -> Result<Self> {
        if tap_layers.is_empty() {
            return Err(Error::invalid("dissector needs at least one tap layer"));
        }
        if let Some(&l) = tap_layers.iter().find(|&&l| l >= ckpt.config.layer_count) {
            return Err(Error::invalid(format!(
                "tap layer {l} out of range for {} hidden layers",
                ckpt.config.layer_count
            )));
        }
        if train_split.is_empty() {
            return Err(Error::invalid("empty probe training split"));
        }
        let start = Instant::now();
        let acts = ckpt.activations(train_split)?;
        let y = labels(train_split);
        let classes = ckpt.config.class_count;
        let probes = tap_layers
            .par_iter()
            .map(|&l| {
                let seed = (u64::from(ckpt.train_seed()) << 8) ^ l as u64;
                Probe::fit(l, &acts[l], &y, classes, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            probes,
            fit_seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn tap_layers(&self) -> Vec<usize> {
        self.probes.iter().map(|p| p.layer).collect()
    }

    /// Mean snapshot logits; `member_probs` holds one distribution per
    /// snapshot in tap order.
    pub fn calibrate(&self, ckpt: &Checkpoint, split: &[TokenSequence]) -> Result<CalibrationResult> {
        let start = Instant::now();
        let acts = ckpt.activations(split)?;
        let classes = ckpt.config.class_count;
        let members = self
            .probes
            .iter()
            .map(|p| {
                let rows: Vec<f64> = acts[p.layer].iter().flat_map(|x| p.logits(x)).collect();
                LogitMatrix::new(split.len(), classes, rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let params = CalibrationParams {
            tap_layers: Some(self.tap_layers()),
            ..Default::default()
        };
        let mut r = combine(Method::DS, params, &members)?;
        r.overhead.calibration_seconds = start.elapsed().as_secs_f64();
        Ok(r)
    }
}

pub fn dissector(
    ckpt: &Checkpoint,
    train_split: &[TokenSequence],
    eval_split: &[TokenSequence],
    tap_layers: &[usize],
) -> Result<CalibrationResult> {
    let ds = Dissector::fit(ckpt, train_split, tap_layers)?;
    let mut r = ds.calibrate(ckpt, eval_split)?;
    r.overhead.calibration_seconds += ds.fit_seconds;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::shannon_entropy;
    use crate::refmodel::{train, MutationOperator};
    use crate::testutil::{toy_config, toy_split};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn trained(seed: u32) -> (Checkpoint, Vec<TokenSequence>, Vec<TokenSequence>) {
        let train_set = toy_split(300, 1);
        let dev = toy_split(60, 2);
        (train(&toy_config(seed), &train_set, &dev).unwrap(), train_set, dev)
    }

    fn assert_close(a: &ProbMatrix, b: &ProbMatrix, tol: f64) {
        assert_eq!((a.rows(), a.classes()), (b.rows(), b.classes()));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn vanilla_keeps_logit_argmax_and_costs_no_calibration() {
        let (ck, _, dev) = trained(1);
        let r = vanilla(&ck, &dev).unwrap();
        assert_eq!(r.predicted(), ck.logits(&dev, None).unwrap().argmax_rows());
        assert_eq!(r.overhead.calibration_seconds, 0.0);
        assert!(r.member_probs.is_none());
        assert_eq!(vanilla(&ck, &dev).unwrap().probs, r.probs);
    }

    /// Logits whose labels are drawn from softmax(l): T = 1 is NLL-optimal in
    /// expectation.
    fn calibrated_logits(n: usize, seed: u64) -> (LogitMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut p = vec![0.0; 5];
        for _ in 0..n {
            let row: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng)).collect();
            softmax_row(&row, 1.0, &mut p);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let y = p.iter().position(|&q| {
                acc += q;
                u < acc
            });
            labels.push(y.unwrap_or(4));
            data.extend(row);
        }
        (LogitMatrix::new(n, 5, data).unwrap(), labels)
    }

    fn grid_nll_minimum(logits: &LogitMatrix, labels: &[usize]) -> (f64, f64) {
        let (lo, hi) = TEMPERATURE_BOUNDS;
        (0..10_000)
            .map(|i| {
                let t = lo + (hi - lo) * i as f64 / 9_999.0;
                (t, mean_nll(logits, labels, t))
            })
            .fold(
                (f64::NAN, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            )
    }

    #[test]
    fn temperature_recovers_one_on_calibrated_logits() {
        let (logits, labels) = calibrated_logits(20_000, 7);
        let t = fit_temperature_logits(&logits, &labels).unwrap();
        assert!((t - 1.0).abs() < 0.05, "fitted {t}");
        let (grid_t, grid_nll) = grid_nll_minimum(&logits, &labels);
        assert!((grid_t - 1.0).abs() < 0.05);
        assert!((mean_nll(&logits, &labels, t) - grid_nll).abs() < 1e-3);
    }

    #[test]
    fn temperature_matches_grid_oracle_on_overconfident_logits() {
        let (logits, labels) = calibrated_logits(3_000, 9);
        let hot: Vec<f64> = logits.as_slice().iter().map(|v| v * 3.0).collect();
        let hot = LogitMatrix::new(logits.rows(), 5, hot).unwrap();
        let t = fit_temperature_logits(&hot, &labels).unwrap();
        assert!(t > 2.0);
        let (_, grid_nll) = grid_nll_minimum(&hot, &labels);
        assert!((mean_nll(&hot, &labels, t) - grid_nll).abs() < 1e-3);
    }

    #[test]
    fn temperature_hits_lower_bound_when_saturated() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let mut r = vec![0.0; 3];
                r[i % 3] = 8.0;
                r
            })
            .collect();
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let t = fit_temperature_logits(&LogitMatrix::from_rows(&rows).unwrap(), &labels).unwrap();
        assert!(t < TEMPERATURE_BOUNDS.0 + 1e-3, "fitted {t}");
    }

    #[test]
    fn temperature_rejects_empty_split() {
        let (ck, _, _) = trained(1);
        assert!(matches!(fit_temperature(&ck, &[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn temperature_scaling_keeps_predictions() {
        let (ck, train_set, dev) = trained(2);
        let ts = temperature_scaling(&ck, &dev, &train_set).unwrap();
        let base = vanilla(&ck, &train_set).unwrap();
        assert_eq!(ts.predicted(), base.predicted());
        assert!(ts.params.temperature.unwrap() > 0.0);
        assert!(ts.overhead.calibration_seconds > 0.0);
    }

    #[test]
    fn mc_dropout_degenerates_to_vanilla_without_dropout() {
        let (mut ck, _, dev) = trained(3);
        let r = mc_dropout(&ck, &dev, DEFAULT_MCD_SAMPLES, 100).unwrap();
        assert_eq!(r.member_probs.as_ref().unwrap().len(), 10);
        assert_eq!(mc_dropout(&ck, &dev, 10, 100).unwrap().probs, r.probs);
        assert_ne!(mc_dropout(&ck, &dev, 10, 200).unwrap().probs, r.probs);

        ck.config.dropout_rate = 0.0;
        let r = mc_dropout(&ck, &dev, 4, 100).unwrap();
        let base = vanilla(&ck, &dev).unwrap();
        assert_close(&r.probs, &base.probs, 1e-12);
        for m in r.member_probs.unwrap() {
            assert_eq!(m, base.probs);
        }
        assert!(matches!(mc_dropout(&ck, &dev, 1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn member_means_match_recomputation() {
        let (ck, _, dev) = trained(4);
        let r = mc_dropout(&ck, &dev, 5, 11).unwrap();
        let members: Vec<LogitMatrix> = (0..5).map(|t| ck.logits(&dev, Some(11 + t)).unwrap()).collect();
        let logits = r.logits.as_ref().unwrap();
        for i in 0..dev.len() {
            for c in 0..3 {
                let oracle = members.iter().map(|m| m.row(i)[c]).sum::<f64>() / 5.0;
                assert!((logits.row(i)[c] - oracle).abs() < 1e-12);
            }
        }

        let pool = MutantPool::build(&ck, MutationSpec::new(MutationOperator::GaussianFuzzing), 7, 3).unwrap();
        let r = pool.calibrate(&dev).unwrap();
        let logits = r.logits.as_ref().unwrap();
        let members: Vec<LogitMatrix> = pool.mutants.iter().map(|m| m.logits(&dev, None).unwrap()).collect();
        for i in 0..dev.len() {
            for c in 0..3 {
                let oracle = members.iter().map(|m| m.row(i)[c]).sum::<f64>() / 7.0;
                assert!((logits.row(i)[c] - oracle).abs() < 1e-12);
            }
        }
        for (labels, m) in r.member_labels.as_ref().unwrap().iter().zip(&members) {
            assert_eq!(labels, &m.argmax_rows());
        }
    }

    #[test]
    fn ensemble_of_identical_members_equals_member() {
        let (ck, _, dev) = trained(5);
        let de = DeepEnsemble::from_members(vec![ck.clone(), ck.clone()]).unwrap();
        let r = de.calibrate(&dev).unwrap();
        let base = vanilla(&ck, &dev).unwrap();
        assert_close(&r.probs, &base.probs, 1e-12);
        for m in r.member_probs.as_ref().unwrap() {
            assert_close(m, &base.probs, 0.0);
        }
    }

    #[test]
    fn ensemble_rejects_duplicate_seeds() {
        let train_set = toy_split(40, 1);
        let cfgs = vec![toy_config(1), toy_config(1)];
        assert!(matches!(
            DeepEnsemble::train(&cfgs, &train_set, &train_set),
            Err(Error::InvalidArgument(_))
        ));
        let mut other = toy_config(2);
        other.hidden_dim = 8;
        assert!(DeepEnsemble::train(&[toy_config(1), other], &train_set, &train_set).is_err());
        assert_eq!(DEFAULT_ENSEMBLE_SIZE, 5);
    }

    /// Seeds 11..=15 on the toy task; the ensemble is at least as accurate as
    /// its weakest member.
    #[test]
    fn ensemble_accuracy_at_least_weakest_member() {
        let train_set = toy_split(300, 1);
        let dev = toy_split(200, 3);
        let cfgs: Vec<ModelConfig> = (11..=15).map(toy_config).collect();
        let de = DeepEnsemble::train(&cfgs, &train_set, &dev).unwrap();
        let r = de.calibrate(&dev).unwrap();
        let y = labels(&dev);
        let acc = r.predicted().iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        let worst = de.members.iter().map(|m| m.dev_accuracy).fold(f64::INFINITY, f64::min);
        assert!(acc >= worst, "ensemble {acc} < weakest member {worst}");
        assert!(de.mean_train_seconds > 0.0);
        assert_eq!(r.member_probs.unwrap().len(), 5);
    }

    #[test]
    fn identity_and_switch_mutants_reproduce_vanilla() {
        let (ck, _, dev) = trained(6);
        let base = vanilla(&ck, &dev).unwrap();
        let zero = MutationSpec {
            fuzz_scale: 0.0,
            ..MutationSpec::new(MutationOperator::GaussianFuzzing)
        };
        let r = mutation_testing(&ck, &dev, zero, 10, 0).unwrap();
        assert_close(&r.probs, &base.probs, 1e-12);
        let ns = mutation_testing(&ck, &dev, MutationSpec::new(MutationOperator::NeuronSwitch), 20, 0).unwrap();
        assert_close(&ns.probs, &base.probs, 1e-9);
        assert_eq!(DEFAULT_MUTANT_COUNT, 100);
        assert!(matches!(
            mutation_testing(&ck, &dev, zero, 0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_tap_dissector_is_its_probe() {
        let (ck, train_set, dev) = trained(7);
        let r = dissector(&ck, &train_set, &dev, &[2]).unwrap();
        let members = r.member_probs.as_ref().unwrap();
        assert_eq!(members.len(), 1);
        assert_close(&r.probs, &members[0], 1e-15);
        assert_eq!(Dissector::default_taps(&ck), vec![0, 1, 2]);
        assert!(matches!(
            dissector(&ck, &train_set, &dev, &[3]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            dissector(&ck, &train_set, &dev, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn last_layer_probe_fits_separable_task() {
        let (ck, train_set, _) = trained(8);
        assert!(ck.dev_accuracy >= 0.9);
        let ds = Dissector::fit(&ck, &train_set, &[2]).unwrap();
        assert!(ds.probes[0].train_accuracy >= 0.9, "{}", ds.probes[0].train_accuracy);
    }

    #[test]
    fn results_are_row_stochastic_and_round_trip_through_json() {
        let (ck, train_set, dev) = trained(9);
        let results = vec![
            vanilla(&ck, &dev).unwrap(),
            temperature_scaling(&ck, &dev, &dev).unwrap(),
            mc_dropout(&ck, &dev, 3, 0).unwrap(),
            mutation_testing(&ck, &dev, MutationSpec::new(MutationOperator::WeightShuffling), 3, 0).unwrap(),
            dissector(&ck, &train_set, &dev, &[0, 2]).unwrap(),
        ];
        for r in results {
            for row in r.probs.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(shannon_entropy(row).is_ok());
            }
            let text = r.to_json().unwrap();
            let back = CalibrationResult::from_json(&text).unwrap();
            assert_eq!(back.probs, r.probs);
            assert_eq!(back.member_probs, r.member_probs);
            assert_eq!(back.method, r.method);
            assert_eq!(back.params, r.params);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }
}
