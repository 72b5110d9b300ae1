//! Config-driven pipeline: corpus preparation, multi-seed calibration
//! studies and report consolidation.
//!
//! A run trains one reference model per seed, calibrates it with every
//! requested method, scores every compatible uncertainty estimate and
//! evaluates the metrics on dev, the shifted splits and OOD. Seed reports
//! are averaged cell by cell. Wall-clock timings go to a separate file so
//! the metric reports stay byte-identical across reruns.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    self, fit_temperature_logits, CalibrationParams, CalibrationResult, DeepEnsemble, Dissector, Method, MutantPool,
    DEFAULT_ENSEMBLE_SIZE, DEFAULT_MCD_SAMPLES, DEFAULT_MUTANT_COUNT,
};
use crate::error::{Error, Result};
use crate::estimate::{self, UeScore, UncertaintyVector, WeightParams};
use crate::metrics::{self, AbstentionCurve, EvalReport, MetricRow, OodRow, DEFAULT_BIN_COUNT};
use crate::prob::{LogitMatrix, TokenSequence};
use crate::refmodel::{
    self, Checkpoint, ModelConfig, MutationOperator, MutationSpec, DEFAULT_FUZZ_SCALE, DEFAULT_MUTATION_RATIO,
};
use crate::serial;
use crate::shift::{
    self, shift_report, stable_hash, synth_corpus, IngestOptions, Pattern, RawRecord, ShiftReport, ShiftedCorpus,
    SplitName, SplitOptions, SynthSpec, SHIFT_REPORT_FILE,
};

pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_CSV_FILE: &str = "eval_report.csv";
pub const OVERHEAD_FILE: &str = "overhead.json";
pub const CHECKPOINT_FILE: &str = "model.dckp";
pub const SEEDS_DIR: &str = "seeds";
pub const DEFAULT_SEEDS: [u32; 5] = [0, 1, 2, 3, 4];

/// Splits every method is evaluated on, in report order.
pub const EVAL_SPLITS: [SplitName; 5] = [
    SplitName::Dev,
    SplitName::Shift1,
    SplitName::Shift2,
    SplitName::Shift3,
    SplitName::Ood,
];

/// Where a run gets its corpus: a directory written by `prepare`, or a
/// synthetic corpus generated in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Prepared(PathBuf),
    Synth(SynthSpec),
}

/// Architecture and optimizer settings. Vocabulary size, head width and
/// seed come from the corpus and the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub context_len: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            context_len: c.context_len,
            hidden_dim: c.hidden_dim,
            layer_count: c.layer_count,
            dropout_rate: c.dropout_rate,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, vocab_size: usize, class_count: usize, seed: u32) -> ModelConfig {
        ModelConfig {
            vocab_size,
            class_count,
            context_len: self.context_len,
            hidden_dim: self.hidden_dim,
            layer_count: self.layer_count,
            dropout_rate: self.dropout_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

fn default_mcd_samples() -> usize {
    DEFAULT_MCD_SAMPLES
}

fn default_members() -> usize {
    DEFAULT_ENSEMBLE_SIZE
}

fn default_mutants() -> usize {
    DEFAULT_MUTANT_COUNT
}

fn default_ratio() -> f64 {
    DEFAULT_MUTATION_RATIO
}

fn default_fuzz_scale() -> f64 {
    DEFAULT_FUZZ_SCALE
}

/// One calibration method with its parameters, tagged by `"method"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", deny_unknown_fields)]
pub enum MethodSpec {
    #[serde(alias = "Vanilla")]
    Base,
    TS,
    MCD {
        #[serde(default = "default_mcd_samples")]
        samples: usize,
    },
    /// The seed's reference model is member 0; the rest are trained with
    /// derived seeds.
    DE {
        #[serde(default = "default_members")]
        members: usize,
    },
    MT {
        operator: MutationOperator,
        #[serde(default = "default_ratio")]
        ratio: f64,
        #[serde(default = "default_mutants")]
        mutants: usize,
        #[serde(default = "default_fuzz_scale")]
        fuzz_scale: f64,
    },
    DS {
        /// Hidden layers to probe; all of them when absent.
        #[serde(default)]
        taps: Option<Vec<usize>>,
    },
}

impl MethodSpec {
    /// Every method at default parameters, MT once per operator.
    pub fn defaults() -> Vec<MethodSpec> {
        let mut v = vec![
            MethodSpec::Base,
            MethodSpec::TS,
            MethodSpec::MCD {
                samples: DEFAULT_MCD_SAMPLES,
            },
            MethodSpec::DE {
                members: DEFAULT_ENSEMBLE_SIZE,
            },
        ];
        v.extend(MutationOperator::ALL.map(|operator| MethodSpec::MT {
            operator,
            ratio: DEFAULT_MUTATION_RATIO,
            mutants: DEFAULT_MUTANT_COUNT,
            fuzz_scale: DEFAULT_FUZZ_SCALE,
        }));
        v.push(MethodSpec::DS { taps: None });
        v
    }

    pub fn method(&self) -> Method {
        match self {
            MethodSpec::Base => Method::Vanilla,
            MethodSpec::TS => Method::TS,
            MethodSpec::MCD { .. } => Method::MCD,
            MethodSpec::DE { .. } => Method::DE,
            MethodSpec::MT { .. } => Method::MT,
            MethodSpec::DS { .. } => Method::DS,
        }
    }

    /// Report key: the method name, plus the operator for MT (`MT-GF`).
    pub fn label(&self) -> String {
        match self {
            MethodSpec::MT { operator, .. } => format!("MT-{}", operator.code()),
            other => other.method().name().to_string(),
        }
    }

    fn mutation(&self) -> Option<MutationSpec> {
        match *self {
            MethodSpec::MT {
                operator,
                ratio,
                fuzz_scale,
                ..
            } => Some(MutationSpec {
                operator,
                ratio,
                fuzz_scale,
            }),
            _ => None,
        }
    }

    fn validate(&self, layer_count: usize) -> Result<()> {
        let label = self.label();
        match self {
            MethodSpec::MCD { samples } if *samples < 2 => {
                Err(Error::invalid(format!("{label}: samples must be at least 2")))
            }
            MethodSpec::DE { members } if *members < 2 => {
                Err(Error::invalid(format!("{label}: members must be at least 2")))
            }
            MethodSpec::MT { mutants, .. } => {
                if *mutants == 0 {
                    return Err(Error::invalid(format!("{label}: mutants must be at least 1")));
                }
                self.mutation().expect("MT spec").validate()
            }
            MethodSpec::DS { taps: Some(taps) } => {
                if taps.is_empty() {
                    return Err(Error::invalid(format!("{label}: taps must not be empty")));
                }
                if let Some(t) = taps.iter().find(|&&t| t >= layer_count) {
                    return Err(Error::invalid(format!(
                        "{label}: tap {t} out of range for {layer_count} hidden layers"
                    )));
                }
                if taps.iter().collect::<BTreeSet<_>>().len() != taps.len() {
                    return Err(Error::invalid(format!("{label}: duplicate taps")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    F1,
    Ece,
    Spearman,
    Auc,
    Aupr,
    Brier,
    Abstention,
    Ood,
}

impl MetricName {
    pub const ALL: [MetricName; 8] = [
        MetricName::F1,
        MetricName::Ece,
        MetricName::Spearman,
        MetricName::Auc,
        MetricName::Aupr,
        MetricName::Brier,
        MetricName::Abstention,
        MetricName::Ood,
    ];

    fn all() -> Vec<MetricName> {
        Self::ALL.to_vec()
    }
}

/// Which seeds write per-split CalibrationResult JSON and uncertainty CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifacts {
    None,
    #[default]
    FirstSeed,
    All,
}

fn default_seeds() -> Vec<u32> {
    DEFAULT_SEEDS.to_vec()
}

fn default_bins() -> usize {
    DEFAULT_BIN_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default = "MethodSpec::defaults")]
    pub methods: Vec<MethodSpec>,
    /// Empty means every score compatible with each method.
    #[serde(default)]
    pub ue_scores: Vec<UeScore>,
    #[serde(default = "MetricName::all")]
    pub metrics: Vec<MetricName>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u32>,
    pub output_dir: PathBuf,
    #[serde(default = "default_bins")]
    pub bin_count: usize,
    #[serde(default)]
    pub artifacts: Artifacts,
    #[serde(default)]
    pub spv: WeightParams,
}

impl RunConfig {
    /// A config over `corpus` with every other field at its default.
    pub fn new(corpus: CorpusSource, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus,
            model: ModelSettings::default(),
            methods: MethodSpec::defaults(),
            ue_scores: Vec::new(),
            metrics: MetricName::all(),
            seeds: default_seeds(),
            output_dir: output_dir.into(),
            bin_count: DEFAULT_BIN_COUNT,
            artifacts: Artifacts::default(),
            spv: WeightParams::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let CorpusSource::Prepared(dir) = &mut cfg.corpus {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        let mut labels = BTreeSet::new();
        for m in &self.methods {
            if !labels.insert(m.label()) {
                return Err(Error::invalid(format!("method {} requested twice", m.label())));
            }
            m.validate(self.model.layer_count)?;
        }
        let requested: Vec<String> = self.methods.iter().map(MethodSpec::label).collect();
        for ue in &self.ue_scores {
            if !self.methods.iter().any(|m| ue.is_compatible(m.method())) {
                return Err(Error::invalid(format!(
                    "incompatible method/ue pair: {}/{ue}",
                    requested.join(",")
                )));
            }
        }
        if self.ue_scores.iter().collect::<BTreeSet<_>>().len() != self.ue_scores.len() {
            return Err(Error::invalid("duplicate ue score"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("no seeds"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::invalid("duplicate seed"));
        }
        if self.bin_count == 0 {
            return Err(Error::invalid("bin_count must be positive"));
        }
        if !(self.spv.w > 0.0 && self.spv.w.is_finite() && self.spv.beta > 0.0 && self.spv.beta.is_finite()) {
            return Err(Error::invalid("spv weight parameters must be positive and finite"));
        }
        // Corpus-dependent sizes are checked once the corpus is known.
        self.model.config(2, 2, 0).validate()?;
        if let CorpusSource::Synth(spec) = &self.corpus {
            spec.validate()?;
        }
        Ok(())
    }

    /// The scores evaluated for `method`, in canonical order.
    pub fn scores_for(&self, method: &MethodSpec) -> Vec<UeScore> {
        let compatible = UeScore::for_method(method.method());
        if self.ue_scores.is_empty() {
            compatible
        } else {
            compatible.into_iter().filter(|u| self.ue_scores.contains(u)).collect()
        }
    }

    fn wants(&self, metric: MetricName) -> bool {
        self.metrics.contains(&metric)
    }

    pub fn load_corpus(&self) -> Result<ShiftedCorpus> {
        let corpus = match &self.corpus {
            CorpusSource::Prepared(dir) => ShiftedCorpus::load(dir)?,
            CorpusSource::Synth(spec) => synth_corpus(spec)?,
        };
        for s in [SplitName::Train, SplitName::Dev] {
            if !corpus.has(s) {
                return Err(Error::invalid(format!("the corpus has an empty {s} split")));
            }
        }
        Ok(corpus)
    }
}

fn derived_seed(seed: u32, tag: &str) -> u64 {
    stable_hash(&format!("{seed}/{tag}"))
}

/// Per-class sub-token lists used for F1.
fn class_subtokens(corpus: &ShiftedCorpus) -> Vec<Vec<String>> {
    corpus.vocab.tokens()[..corpus.class_count]
        .iter()
        .map(|t| metrics::subtokens(t))
        .collect()
}

fn per_sample_f1(names: &[Vec<String>], predicted: &[usize], labels: &[usize]) -> Result<Vec<f64>> {
    predicted
        .iter()
        .zip(labels)
        .map(|(&p, &y)| metrics::subtoken_f1(&names[p], &names[y]).map(|s| s.f1))
        .collect()
}

/// A method's output on one split.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub split: SplitName,
    pub labels: Vec<usize>,
    pub result: CalibrationResult,
    /// Sub-token F1 of the method's own prediction per sample.
    pub f1: Vec<f64>,
    pub scores: Vec<UncertaintyVector>,
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub spec: MethodSpec,
    pub label: String,
    pub splits: Vec<SplitOutcome>,
    pub calibration_s: f64,
    /// Uncertainty time: the deterministic forward pass for methods that
    /// reuse it, plus the mean time of one score over all splits.
    pub ue_s: f64,
}

impl MethodRun {
    pub fn split(&self, name: SplitName) -> Option<&SplitOutcome> {
        self.splits.iter().find(|s| s.split == name)
    }
}

/// The unmodified model's predictions on one split.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub logits: LogitMatrix,
    pub predicted: Vec<usize>,
    pub f1: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u32,
    pub model: Checkpoint,
    pub train_s: f64,
    pub inference_s: f64,
    pub eval_samples: usize,
    pub baseline: BTreeMap<SplitName, Baseline>,
    pub methods: Vec<MethodRun>,
    pub report: EvalReport,
}

impl SeedRun {
    pub fn method(&self, label: &str) -> Option<&MethodRun> {
        self.methods.iter().find(|m| m.label == label)
    }
}

fn eval_splits(corpus: &ShiftedCorpus) -> Vec<SplitName> {
    EVAL_SPLITS.into_iter().filter(|&s| corpus.has(s)).collect()
}

/// Scores whose errors are judged against the unmodified model's prediction
/// rather than the calibrated one.
fn judges_baseline(ue: UeScore) -> bool {
    matches!(
        ue,
        UeScore::LCR | UeScore::SpvLinear | UeScore::SpvLog | UeScore::SpvExp
    )
}

/// Trains the seed's model and runs every configured method on every
/// evaluation split.
pub fn run_seed(config: &RunConfig, corpus: &ShiftedCorpus, seed: u32) -> Result<SeedRun> {
    let model_cfg = config.model.config(corpus.vocab.len(), corpus.class_count, seed);
    model_cfg.validate()?;
    let train_set = corpus.split(SplitName::Train);
    let dev = corpus.split(SplitName::Dev);
    let start = Instant::now();
    let model = refmodel::train(&model_cfg, train_set, dev)?;
    let train_s = start.elapsed().as_secs_f64();

    let names = class_subtokens(corpus);
    let splits = eval_splits(corpus);
    let labels: BTreeMap<SplitName, Vec<usize>> = splits
        .iter()
        .map(|&s| (s, calibrate::labels(corpus.split(s))))
        .collect();

    let start = Instant::now();
    let mut logits = BTreeMap::new();
    for &s in &splits {
        logits.insert(s, model.logits(corpus.split(s), None)?);
    }
    let inference_s = start.elapsed().as_secs_f64();
    let mut baseline = BTreeMap::new();
    for &s in &splits {
        let lg: LogitMatrix = logits.remove(&s).expect("logits per split");
        let predicted = lg.argmax_rows();
        let f1 = per_sample_f1(&names, &predicted, &labels[&s])?;
        baseline.insert(
            s,
            Baseline {
                logits: lg,
                predicted,
                f1,
            },
        );
    }

    let mut methods = Vec::with_capacity(config.methods.len());
    for spec in &config.methods {
        let ctx = SeedContext {
            corpus,
            model: &model,
            train_s,
            splits: &splits,
            baseline: &baseline,
            seed,
        };
        let (results, calibration_s, reuses_inference) = ctx.calibrate(spec)?;
        let scores = config.scores_for(spec);
        let mut outcomes = Vec::with_capacity(results.len());
        let mut score_s = 0.0;
        for (&s, result) in splits.iter().zip(results) {
            let base = &baseline[&s];
            let start = Instant::now();
            let vectors = scores
                .iter()
                .map(|&ue| estimate::score(ue, &result, &base.predicted, config.spv))
                .collect::<Result<Vec<_>>>()?;
            score_s += start.elapsed().as_secs_f64();
            let predicted = result.predicted();
            let f1 = per_sample_f1(&names, &predicted, &labels[&s])?;
            outcomes.push(SplitOutcome {
                split: s,
                labels: labels[&s].clone(),
                result,
                f1,
                scores: vectors,
            });
        }
        let mean_score_s = if scores.is_empty() {
            0.0
        } else {
            score_s / scores.len() as f64
        };
        methods.push(MethodRun {
            spec: spec.clone(),
            label: spec.label(),
            splits: outcomes,
            calibration_s,
            ue_s: mean_score_s + if reuses_inference { inference_s } else { 0.0 },
        });
    }

    let eval_samples = labels.values().map(Vec::len).sum();
    let report = evaluate(config, seed, &methods, &baseline, corpus.class_count)?;
    Ok(SeedRun {
        seed,
        model,
        train_s,
        inference_s,
        eval_samples,
        baseline,
        methods,
        report,
    })
}

struct SeedContext<'a> {
    corpus: &'a ShiftedCorpus,
    model: &'a Checkpoint,
    train_s: f64,
    splits: &'a [SplitName],
    baseline: &'a BTreeMap<SplitName, Baseline>,
    seed: u32,
}

impl SeedContext<'_> {
    fn split(&self, s: SplitName) -> &[TokenSequence] {
        self.corpus.split(s)
    }

    /// Results per evaluation split, total calibration seconds, and whether
    /// the method consumes the shared deterministic forward pass.
    fn calibrate(&self, spec: &MethodSpec) -> Result<(Vec<CalibrationResult>, f64, bool)> {
        let tag = spec.label();
        let from_baseline = |method, params: &CalibrationParams| {
            self.splits
                .iter()
                .map(|s| CalibrationResult::from_logits(method, params.clone(), self.baseline[s].logits.clone()))
                .collect::<Result<Vec<_>>>()
        };
        match spec {
            MethodSpec::Base => Ok((
                from_baseline(Method::Vanilla, &CalibrationParams::default())?,
                0.0,
                true,
            )),
            MethodSpec::TS => {
                let start = Instant::now();
                let dev_labels = calibrate::labels(self.split(SplitName::Dev));
                let t = fit_temperature_logits(&self.baseline[&SplitName::Dev].logits, &dev_labels)?;
                let fit_s = start.elapsed().as_secs_f64();
                let params = CalibrationParams {
                    temperature: Some(t),
                    ..Default::default()
                };
                Ok((from_baseline(Method::TS, &params)?, fit_s, true))
            }
            MethodSpec::MCD { samples } => {
                let seed = derived_seed(self.seed, &tag);
                let results = self
                    .splits
                    .iter()
                    .map(|&s| calibrate::mc_dropout(self.model, self.split(s), *samples, seed))
                    .collect::<Result<Vec<_>>>()?;
                let total = results.iter().map(|r| r.overhead.calibration_seconds).sum();
                Ok((results, total, false))
            }
            MethodSpec::DE { members } => {
                let trained = (1..*members)
                    .into_par_iter()
                    .map(|k| {
                        let member_seed = derived_seed(self.seed, &format!("{tag}/{k}")) as u32;
                        let cfg = self.model.config.with_seed(member_seed);
                        let start = Instant::now();
                        refmodel::train(&cfg, self.split(SplitName::Train), self.split(SplitName::Dev))
                            .map(|ck| (ck, start.elapsed().as_secs_f64()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mean_train_s = (self.train_s + trained.iter().map(|(_, s)| s).sum::<f64>()) / *members as f64;
                let mut all = vec![self.model.clone()];
                all.extend(trained.into_iter().map(|(ck, _)| ck));
                let ensemble = DeepEnsemble::from_members(all)?;
                let results = self
                    .splits
                    .iter()
                    .map(|&s| ensemble.calibrate(self.split(s)))
                    .collect::<Result<Vec<_>>>()?;
                let total = mean_train_s + results.iter().map(|r| r.overhead.calibration_seconds).sum::<f64>();
                Ok((results, total, false))
            }
            MethodSpec::MT { mutants, .. } => {
                let mutation = spec.mutation().expect("MT spec");
                let pool = MutantPool::build(self.model, mutation, *mutants, derived_seed(self.seed, &tag))?;
                let results = self
                    .splits
                    .iter()
                    .map(|&s| pool.calibrate(self.split(s)))
                    .collect::<Result<Vec<_>>>()?;
                let total = pool.build_seconds + results.iter().map(|r| r.overhead.calibration_seconds).sum::<f64>();
                Ok((results, total, false))
            }
            MethodSpec::DS { taps } => {
                let taps = taps.clone().unwrap_or_else(|| Dissector::default_taps(self.model));
                let ds = Dissector::fit(self.model, self.split(SplitName::Train), &taps)?;
                let results = self
                    .splits
                    .iter()
                    .map(|&s| ds.calibrate(self.model, self.split(s)))
                    .collect::<Result<Vec<_>>>()?;
                let total = ds.fit_seconds + results.iter().map(|r| r.overhead.calibration_seconds).sum::<f64>();
                Ok((results, total, false))
            }
        }
    }
}

/// Maps an undefined metric to a missing value; other errors propagate.
fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn evaluate(
    config: &RunConfig,
    seed: u32,
    methods: &[MethodRun],
    baseline: &BTreeMap<SplitName, Baseline>,
    classes: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        bin_count: config.bin_count,
        seeds: vec![seed],
        rows: Vec::new(),
        abstention_curves: Vec::new(),
        ood: Vec::new(),
    };
    let want = |m| config.wants(m);
    let taus = metrics::tau_grid();
    for m in methods {
        let ue_names: Vec<Option<UeScore>> = match m.splits.first() {
            Some(o) if !o.scores.is_empty() => o.scores.iter().map(|u| Some(u.method)).collect(),
            _ => vec![None],
        };
        for (k, ue) in ue_names.iter().enumerate() {
            let ue_label = ue.map_or("-", UeScore::name);
            for o in &m.splits {
                let base = &baseline[&o.split];
                let predicted = o.result.predicted();
                let correct: Vec<bool> = predicted.iter().zip(&o.labels).map(|(p, y)| p == y).collect();
                let confidences = o.result.probs.confidences();
                let mut row = MetricRow {
                    method: m.label.clone(),
                    ue: ue_label.to_string(),
                    split: o.split.name().to_string(),
                    f1: None,
                    ece: None,
                    spearman: None,
                    auc: None,
                    aupr: None,
                    brier: None,
                };
                if want(MetricName::F1) {
                    row.f1 = Some(o.f1.iter().sum::<f64>() / o.f1.len() as f64);
                }
                if want(MetricName::Ece) {
                    row.ece = defined(metrics::ece_from(&confidences, &correct, config.bin_count))?;
                }
                if want(MetricName::Spearman) {
                    row.spearman = defined(metrics::spearman(&confidences, &correct))?;
                }
                if let Some(ue) = ue {
                    let u = &o.scores[k];
                    let (subject, subject_f1) = if judges_baseline(*ue) {
                        (&base.predicted, &base.f1)
                    } else {
                        (&predicted, &o.f1)
                    };
                    let errors: Vec<bool> = subject.iter().zip(&o.labels).map(|(p, y)| p != y).collect();
                    if want(MetricName::Auc) {
                        row.auc = defined(metrics::auc(&u.values, &errors))?;
                    }
                    if want(MetricName::Aupr) {
                        row.aupr = defined(metrics::aupr(&u.values, &errors))?;
                    }
                    if want(MetricName::Brier) {
                        row.brier = defined(metrics::brier(&u.unit_interval(classes), &errors))?;
                    }
                    if want(MetricName::Abstention) {
                        report.abstention_curves.push(AbstentionCurve {
                            method: m.label.clone(),
                            ue: ue_label.to_string(),
                            split: row.split.clone(),
                            points: metrics::selective_prediction_curve(subject_f1, &u.values, &taus)?,
                        });
                    }
                }
                report.rows.push(row);
            }
            if let (Some(_), true) = (ue, want(MetricName::Ood)) {
                if let (Some(dev), Some(ood)) = (m.split(SplitName::Dev), m.split(SplitName::Ood)) {
                    let s = metrics::ood_detection(
                        &dev.scores[k].unit_interval(classes),
                        &ood.scores[k].unit_interval(classes),
                    )?;
                    report.ood.push(OodRow {
                        method: m.label.clone(),
                        ue: ue_label.to_string(),
                        split: SplitName::Ood.name().to_string(),
                        auc: s.auc,
                        aupr: s.aupr,
                        brier: s.brier,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Per-method wall-clock cost, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverheadRow {
    pub method: String,
    #[serde(serialize_with = "serial::f64_17")]
    pub calibration_s: f64,
    #[serde(serialize_with = "serial::f64_17")]
    pub ue_s: f64,
    #[serde(serialize_with = "serial::f64_17")]
    pub total_s: f64,
    #[serde(serialize_with = "serial::f64_17")]
    pub per_snippet_s: f64,
    /// `total_s` over Base's `total_s` from the same run; absent without
    /// Base.
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverheadTable {
    pub seeds: Vec<u32>,
    pub eval_samples: usize,
    #[serde(serialize_with = "serial::f64_17")]
    pub train_s: f64,
    pub rows: Vec<OverheadRow>,
}

impl OverheadTable {
    pub fn from_runs(runs: &[&SeedRun]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::invalid("no seed runs"))?;
        let n = runs.len() as f64;
        let mut rows: Vec<OverheadRow> = first
            .methods
            .iter()
            .map(|m| {
                let (mut cal, mut ue) = (0.0, 0.0);
                for r in runs {
                    let mr = r.method(&m.label).expect("same methods in every seed");
                    cal += mr.calibration_s;
                    ue += mr.ue_s;
                }
                let (cal, ue) = (cal / n, ue / n);
                OverheadRow {
                    method: m.label.clone(),
                    calibration_s: cal,
                    ue_s: ue,
                    total_s: cal + ue,
                    per_snippet_s: (cal + ue) / first.eval_samples as f64,
                    multiplier: None,
                }
            })
            .collect();
        let base = rows
            .iter()
            .find(|r| r.method == Method::Vanilla.name())
            .map(|r| r.total_s);
        if let Some(b) = base.filter(|b| *b > 0.0) {
            for r in &mut rows {
                r.multiplier = Some(r.total_s / b);
            }
        }
        Ok(Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            eval_samples: first.eval_samples,
            train_s: runs.iter().map(|r| r.train_s).sum::<f64>() / n,
            rows,
        })
    }

    pub fn row(&self, method: &str) -> Option<&OverheadRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn seed_dir(out: &Path, seed: u32) -> PathBuf {
    out.join(SEEDS_DIR).join(format!("seed-{seed}"))
}

fn write_seed(run: &SeedRun, dir: &Path, artifacts: bool) -> Result<()> {
    write_file(&dir.join(EVAL_REPORT_FILE), run.report.to_json()?)?;
    run.model.save(&dir.join(CHECKPOINT_FILE))?;
    if !artifacts {
        return Ok(());
    }
    for m in &run.methods {
        for o in &m.splits {
            let stem = format!("{}.{}", m.label, o.split);
            write_file(
                &dir.join("calibration").join(format!("{stem}.json")),
                o.result.to_json()?,
            )?;
            let vectors: Vec<(&str, &UncertaintyVector)> = o.scores.iter().map(|u| (m.label.as_str(), u)).collect();
            let mut buf = Vec::new();
            estimate::write_csv(&vectors, &mut buf)?;
            write_file(&dir.join("uncertainty").join(format!("{stem}.csv")), buf)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub overhead: OverheadTable,
    pub warnings: Vec<String>,
}

/// Runs every seed, writes per-seed and averaged reports under
/// `config.output_dir`, and returns the averages.
pub fn execute(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let corpus = config.load_corpus()?;
    let mut warnings: Vec<String> = corpus.warnings.iter().map(|w| w.message.clone()).collect();
    if config.wants(MetricName::Ood) && !corpus.has(SplitName::Ood) {
        warnings.push("the corpus has no OOD split; OOD detection skipped".into());
    }
    let out = &config.output_dir;
    let mut reports = Vec::with_capacity(config.seeds.len());
    let mut runs = Vec::with_capacity(config.seeds.len());
    for (i, &seed) in config.seeds.iter().enumerate() {
        let run = run_seed(config, &corpus, seed)?;
        let artifacts = match config.artifacts {
            Artifacts::None => false,
            Artifacts::FirstSeed => i == 0,
            Artifacts::All => true,
        };
        write_seed(&run, &seed_dir(out, seed), artifacts)?;
        reports.push(run.report.clone());
        // Keep only what the overhead table needs.
        runs.push(SeedRun {
            baseline: BTreeMap::new(),
            methods: run
                .methods
                .into_iter()
                .map(|m| MethodRun {
                    splits: Vec::new(),
                    ..m
                })
                .collect(),
            ..run
        });
    }
    let report = EvalReport::mean(&reports)?;
    let overhead = OverheadTable::from_runs(&runs.iter().collect::<Vec<_>>())?;
    write_file(&out.join(EVAL_REPORT_FILE), report.to_json()?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&out.join(EVAL_CSV_FILE), csv)?;
    write_file(&out.join(OVERHEAD_FILE), overhead.to_json()?)?;
    Ok(RunOutput {
        report,
        overhead,
        warnings,
    })
}

pub enum PrepareSource {
    Corpus(PathBuf),
    Synth(SynthSpec),
}

pub struct PrepareOptions {
    pub source: PrepareSource,
    /// Required for a corpus file; a synthetic source defaults to its own
    /// drift levels.
    pub pattern: Option<Pattern>,
    pub out: PathBuf,
    pub split: SplitOptions,
    pub keep_str: usize,
    pub keep_num: usize,
    /// Train a default model on the train split to report embedding cosine.
    pub cosine: bool,
}

impl PrepareOptions {
    pub fn new(source: PrepareSource, out: impl Into<PathBuf>) -> Self {
        Self {
            source,
            pattern: None,
            out: out.into(),
            split: SplitOptions::default(),
            keep_str: shift::DEFAULT_KEEP_STR,
            keep_num: shift::DEFAULT_KEEP_NUM,
            cosine: true,
        }
    }
}

/// Flattens a corpus back into raw records, target last.
fn raw_records(corpus: &ShiftedCorpus) -> Vec<RawRecord> {
    corpus
        .splits
        .values()
        .flatten()
        .map(|s| RawRecord {
            id: s.id.clone(),
            meta: s.meta.clone(),
            tokens: s
                .tokens
                .iter()
                .chain(std::iter::once(&s.target))
                .map(|&t| corpus.vocab.token(t).to_string())
                .collect(),
        })
        .collect()
}

/// Builds the shifted corpus, writes its files and the shift report to
/// `opts.out`.
pub fn prepare(opts: &PrepareOptions) -> Result<(ShiftedCorpus, ShiftReport)> {
    let ingest_with = |records: Vec<RawRecord>, pattern: Pattern| {
        let mut io = IngestOptions::new(pattern);
        io.split = opts.split.clone();
        io.keep_str = opts.keep_str;
        io.keep_num = opts.keep_num;
        shift::ingest(records, &io)
    };
    let corpus = match &opts.source {
        PrepareSource::Corpus(path) => {
            let pattern = opts
                .pattern
                .ok_or_else(|| Error::invalid("--pattern is required with --corpus"))?;
            ingest_with(shift::read_corpus(path)?, pattern)?
        }
        PrepareSource::Synth(spec) => match opts.pattern {
            None | Some(Pattern::Synthetic) => synth_corpus(spec)?,
            Some(p) => ingest_with(raw_records(&synth_corpus(spec)?), p)?,
        },
    };
    let encoder = if opts.cosine {
        let cfg = ModelSettings::default().config(corpus.vocab.len(), corpus.class_count, 0);
        Some(refmodel::train(
            &cfg,
            corpus.split(SplitName::Train),
            corpus.split(SplitName::Dev),
        )?)
    } else {
        None
    };
    let report = shift_report(&corpus, encoder.as_ref())?;
    corpus.save(&opts.out)?;
    write_file(&opts.out.join(SHIFT_REPORT_FILE), report.to_json()?)?;
    Ok((corpus, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

/// One value of a consolidated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub table: String,
    pub method: String,
    pub ue: String,
    pub split: String,
    pub metric: String,
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub value: Option<f64>,
}

/// Plot-ready tidy tables. Table names:
///
/// - `calibration`: F1 per method and split
/// - `calibration_series`: ECE and Spearman per method and split
/// - `misclassification`: AUC, AUPR and Brier per method, score and split
/// - `abstention`: `f1@tau` per method, score and split, one row per level
/// - `ood`: AUC, AUPR and Brier per method and score
/// - `overhead`: per-method timing (written to its own file)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Consolidated {
    pub cells: Vec<Cell>,
}

const CELL_COLUMNS: [&str; 6] = ["table", "method", "ue", "split", "metric", "value"];

impl Consolidated {
    pub fn from_eval(report: &EvalReport) -> Self {
        let mut cells = Vec::new();
        let mut push = |table: &str, method: &str, ue: &str, split: &str, metric: &str, value: Option<f64>| {
            cells.push(Cell {
                table: table.into(),
                method: method.into(),
                ue: ue.into(),
                split: split.into(),
                metric: metric.into(),
                value,
            })
        };
        // Calibration quality does not depend on the score; take each
        // (method, split) once.
        let mut seen = BTreeSet::new();
        for r in &report.rows {
            if seen.insert((r.method.as_str(), r.split.as_str())) {
                push("calibration", &r.method, "", &r.split, "f1", r.f1);
            }
        }
        seen.clear();
        for r in &report.rows {
            if seen.insert((r.method.as_str(), r.split.as_str())) {
                push("calibration_series", &r.method, "", &r.split, "ece", r.ece);
                push("calibration_series", &r.method, "", &r.split, "spearman", r.spearman);
            }
        }
        for r in report.rows.iter().filter(|r| r.ue != "-") {
            push("misclassification", &r.method, &r.ue, &r.split, "auc", r.auc);
            push("misclassification", &r.method, &r.ue, &r.split, "aupr", r.aupr);
            push("misclassification", &r.method, &r.ue, &r.split, "brier", r.brier);
        }
        for c in &report.abstention_curves {
            for p in &c.points {
                push(
                    "abstention",
                    &c.method,
                    &c.ue,
                    &c.split,
                    &format!("f1@{:.2}", p.tau),
                    Some(p.f1),
                );
            }
        }
        for o in &report.ood {
            push("ood", &o.method, &o.ue, &o.split, "auc", Some(o.auc));
            push("ood", &o.method, &o.ue, &o.split, "aupr", Some(o.aupr));
            push("ood", &o.method, &o.ue, &o.split, "brier", Some(o.brier));
        }
        Self { cells }
    }

    pub fn from_overhead(table: &OverheadTable) -> Self {
        let cells = table
            .rows
            .iter()
            .flat_map(|r| {
                [
                    ("calibration_s", Some(r.calibration_s)),
                    ("ue_s", Some(r.ue_s)),
                    ("total_s", Some(r.total_s)),
                    ("per_snippet_s", Some(r.per_snippet_s)),
                    ("multiplier", r.multiplier),
                ]
                .map(|(metric, value)| Cell {
                    table: "overhead".into(),
                    method: r.method.clone(),
                    ue: String::new(),
                    split: String::new(),
                    metric: metric.into(),
                    value,
                })
            })
            .collect();
        Self { cells }
    }

    pub fn table<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Cell> + 'a {
        self.cells.iter().filter(move |c| c.table == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CELL_COLUMNS)?;
        for c in &self.cells {
            let value = serial::cell17(c.value);
            w.write_record([&c.table, &c.method, &c.ue, &c.split, &c.metric, &value])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        if rd.headers()?.iter().ne(CELL_COLUMNS) {
            return Err(Error::format(format!("expected columns {}", CELL_COLUMNS.join(","))));
        }
        let mut cells = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let value =
                serial::parse_cell(&rec[5]).map_err(|e| Error::format(format!("bad value {:?}: {e}", &rec[5])))?;
            cells.push(Cell {
                table: rec[0].into(),
                method: rec[1].into(),
                ue: rec[2].into(),
                split: rec[3].into(),
                metric: rec[4].into(),
                value,
            });
        }
        Ok(Self { cells })
    }

    pub fn render(&self, format: ReportFormat) -> Result<Vec<u8>> {
        match format {
            ReportFormat::Json => Ok(self.to_json()?.into_bytes()),
            ReportFormat::Csv => {
                let mut buf = Vec::new();
                self.write_csv(&mut buf)?;
                Ok(buf)
            }
        }
    }
}

/// Reads a run directory and writes `report.<ext>` and
/// `overhead_report.<ext>` into `out` (the run directory by default).
/// Returns the written paths, metric report first.
pub fn consolidate(run_dir: &Path, format: ReportFormat, out: Option<&Path>) -> Result<[PathBuf; 2]> {
    let eval = EvalReport::from_json(&read_file(&run_dir.join(EVAL_REPORT_FILE))?)
        .map_err(|e| Error::format(format!("{}: {e}", run_dir.join(EVAL_REPORT_FILE).display())))?;
    let overhead = OverheadTable::from_json(&read_file(&run_dir.join(OVERHEAD_FILE))?)
        .map_err(|e| Error::format(format!("{}: {e}", run_dir.join(OVERHEAD_FILE).display())))?;
    let out = out.unwrap_or(run_dir);
    let ext = format.extension();
    let report_path = out.join(format!("report.{ext}"));
    let overhead_path = out.join(format!("overhead_report.{ext}"));
    write_file(&report_path, Consolidated::from_eval(&eval).render(format)?)?;
    write_file(&overhead_path, Consolidated::from_overhead(&overhead).render(format)?)?;
    Ok([report_path, overhead_path])
}
