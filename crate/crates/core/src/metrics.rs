//! Calibration and uncertainty-quality metrics, selective prediction and OOD
//! detection, plus the [`EvalReport`] that collects them.
//!
//! Error-detection metrics treat misclassified samples as the positive class
//! and expect uncertainty scores where larger means "more likely wrong".

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::PredictionRecord;
use crate::serial;

pub const DEFAULT_BIN_COUNT: usize = 10;
/// Number of abstention levels: tau = 0, 0.05, ..., 0.95.
pub const TAU_STEPS: usize = 20;

/// Slack for confidences that overshoot `[0, 1]` through rounding.
const UNIT_SLACK: f64 = 1e-12;

/// Zero-based bin for confidence `c`, where bin `k` (1-based) covers
/// `((k-1)/K, k/K]` and `c == 0` joins the first bin.
pub fn ece_bin(c: f64, bins: usize) -> usize {
    let k = bins as f64;
    let mut b = ((c * k).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    // Repair float disagreement between `c * K` and the `k / K` boundaries.
    while b > 0 && c <= b as f64 / k {
        b -= 1;
    }
    while b + 1 < bins && c > (b + 1) as f64 / k {
        b += 1;
    }
    b
}

fn check_unit(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|&&x| !(-UNIT_SLACK..=1.0 + UNIT_SLACK).contains(&x)) {
        Some(x) => Err(Error::invalid(format!("{name} value {x} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<f64> {
    let conf: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    let correct: Vec<bool> = records.iter().map(|r| r.correct).collect();
    ece_from(&conf, &correct, bins)
}

pub fn ece_from(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if bins < 1 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    if confidences.is_empty() {
        return Err(Error::invalid("ece needs at least one record"));
    }
    check_aligned(confidences.len(), correct.len())?;
    check_unit("confidence", confidences)?;
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ece_bin(c, bins);
        conf_sum[b] += c;
        hits[b] += ok as usize;
        count[b] += 1;
    }
    let n = confidences.len() as f64;
    let total = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (conf_sum[b] / m - hits[b] as f64 / m).abs()
        })
        .sum::<f64>();
    Ok(total.clamp(0.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman rank correlation between confidence and per-sample correctness.
pub fn spearman(confidences: &[f64], correct: &[bool]) -> Result<f64> {
    let y: Vec<f64> = correct.iter().map(|&c| c as u8 as f64).collect();
    spearman_values(confidences, &y)
}

pub fn spearman_values(x: &[f64], y: &[f64]) -> Result<f64> {
    check_aligned(x.len(), y.len())?;
    if x.is_empty() {
        return Err(Error::invalid("spearman needs at least one sample"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::undefined("spearman correlation of a constant vector"))
}

fn class_counts(errors: &[bool]) -> (usize, usize) {
    let pos = errors.iter().filter(|&&e| e).count();
    (pos, errors.len() - pos)
}

/// Probability that a random misclassified sample scores above a random
/// correct one, ties counting one half.
pub fn auc(uncertainties: &[f64], errors: &[bool]) -> Result<f64> {
    check_aligned(uncertainties.len(), errors.len())?;
    let (pos, neg) = class_counts(errors);
    if pos == 0 || neg == 0 {
        return Err(Error::undefined("auc needs both positive and negative samples"));
    }
    let ranks = average_ranks(uncertainties);
    let rank_sum: f64 = ranks.iter().zip(errors).filter(|(_, &e)| e).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok(((rank_sum - p * (p + 1.0) / 2.0) / (p * n)).clamp(0.0, 1.0))
}

/// Step-wise area under the precision-recall curve with errors positive,
/// sweeping thresholds from the largest uncertainty down; tied scores enter
/// together.
pub fn aupr(uncertainties: &[f64], errors: &[bool]) -> Result<f64> {
    check_aligned(uncertainties.len(), errors.len())?;
    let (pos, _) = class_counts(errors);
    if pos == 0 {
        return Err(Error::undefined("aupr needs at least one positive sample"));
    }
    let mut order: Vec<usize> = (0..uncertainties.len()).collect();
    order.sort_by(|&a, &b| uncertainties[b].total_cmp(&uncertainties[a]));
    let (mut tp, mut seen, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let u = uncertainties[order[i]];
        while i < order.len() && uncertainties[order[i]] == u {
            tp += errors[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(area.clamp(0.0, 1.0))
}

/// Mean squared gap between the uncertainty and the error indicator.
pub fn brier(uncertainties: &[f64], errors: &[bool]) -> Result<f64> {
    check_aligned(uncertainties.len(), errors.len())?;
    if uncertainties.is_empty() {
        return Err(Error::invalid("brier needs at least one sample"));
    }
    check_unit("uncertainty", uncertainties)?;
    let sum: f64 = uncertainties
        .iter()
        .zip(errors)
        .map(|(u, &e)| (u - e as u8 as f64).powi(2))
        .sum();
    Ok(sum / uncertainties.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubtokenScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Splits an identifier into lower-case sub-tokens on separators,
/// camelCase humps and acronym boundaries: `getHTTPCount_v2` gives
/// `get http count v2`.
pub fn subtokens(name: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in name.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let hump = prev.is_lowercase() && cur.is_uppercase();
            let acronym_end = prev.is_uppercase() && cur.is_uppercase() && next_lower;
            if hump || acronym_end {
                out.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        out.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    out
}

/// Multiset sub-token precision, recall and F1.
pub fn subtoken_f1<S: AsRef<str>>(predicted: &[S], gold: &[S]) -> Result<SubtokenScore> {
    if gold.is_empty() {
        return Err(Error::invalid("gold sub-token list is empty"));
    }
    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *remaining.entry(g.as_ref()).or_default() += 1;
    }
    let mut matched = 0usize;
    for p in predicted {
        if let Some(c) = remaining.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    let precision = if predicted.is_empty() {
        0.0
    } else {
        matched as f64 / predicted.len() as f64
    };
    let recall = matched as f64 / gold.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SubtokenScore { precision, recall, f1 })
}

/// F1 of a predicted identifier against the gold identifier.
pub fn name_f1(predicted: &str, gold: &str) -> Result<f64> {
    subtoken_f1(&subtokens(predicted), &subtokens(gold)).map(|s| s.f1)
}

/// `{0, 0.05, ..., 0.95}`; each level is `k / 20` so it prints and parses
/// back exactly at two decimals.
pub fn tau_grid() -> Vec<f64> {
    (0..TAU_STEPS).map(|k| k as f64 / TAU_STEPS as f64).collect()
}

/// Number of samples removed at abstention level `tau`, at most `n - 1`.
pub fn abstained(tau: f64, n: usize) -> usize {
    // Shave rounding residue so that e.g. 0.15 * 20 does not ceil to 4.
    let raw = (tau * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.min(n.saturating_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(serialize_with = "serial::f64_17")]
    pub tau: f64,
    #[serde(serialize_with = "serial::f64_17")]
    pub f1: f64,
}

/// For each `tau`, drops the `ceil(tau * N)` most uncertain samples (equal
/// scores drop the lower index first) and averages `f1` over the rest.
pub fn selective_prediction_curve(f1: &[f64], uncertainties: &[f64], taus: &[f64]) -> Result<Vec<CurvePoint>> {
    check_aligned(f1.len(), uncertainties.len())?;
    if f1.is_empty() {
        return Err(Error::invalid("selective prediction needs at least one sample"));
    }
    if let Some(t) = taus.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Error::invalid(format!("abstention level {t} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..f1.len()).collect();
    order.sort_by(|&a, &b| uncertainties[b].total_cmp(&uncertainties[a]).then(a.cmp(&b)));
    // suffix[i] = sum of f1 over order[i..]
    let mut suffix = vec![0.0; order.len() + 1];
    for i in (0..order.len()).rev() {
        suffix[i] = suffix[i + 1] + f1[order[i]];
    }
    Ok(taus
        .iter()
        .map(|&tau| {
            let drop = abstained(tau, f1.len());
            CurvePoint {
                tau,
                f1: suffix[drop] / (f1.len() - drop) as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodScores {
    pub auc: f64,
    pub aupr: f64,
    pub brier: f64,
}

/// Separates in-distribution from OOD samples with OOD as the positive class.
/// Scores must already lie in `[0, 1]`.
pub fn ood_detection(id_uncertainties: &[f64], ood_uncertainties: &[f64]) -> Result<OodScores> {
    if id_uncertainties.is_empty() || ood_uncertainties.is_empty() {
        return Err(Error::invalid(
            "ood detection needs in- and out-of-distribution samples",
        ));
    }
    let u: Vec<f64> = id_uncertainties.iter().chain(ood_uncertainties).copied().collect();
    let labels: Vec<bool> = (0..u.len()).map(|i| i >= id_uncertainties.len()).collect();
    Ok(OodScores {
        auc: auc(&u, &labels)?,
        aupr: aupr(&u, &labels)?,
        brier: brier(&u, &labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub method: String,
    pub ue: String,
    pub split: String,
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub f1: Option<f64>,
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub ece: Option<f64>,
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub spearman: Option<f64>,
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub auc: Option<f64>,
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub aupr: Option<f64>,
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub brier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstentionCurve {
    pub method: String,
    pub ue: String,
    pub split: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodRow {
    pub method: String,
    pub ue: String,
    pub split: String,
    #[serde(serialize_with = "serial::f64_17")]
    pub auc: f64,
    #[serde(serialize_with = "serial::f64_17")]
    pub aupr: f64,
    #[serde(serialize_with = "serial::f64_17")]
    pub brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub bin_count: usize,
    pub seeds: Vec<u32>,
    pub rows: Vec<MetricRow>,
    pub abstention_curves: Vec<AbstentionCurve>,
    pub ood: Vec<OodRow>,
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

const CURVE_PREFIX: &str = "abstention_f1@";
const OOD_PREFIX: &str = "ood_";

fn cell(method: &str, ue: &str, split: &str, metric: &str, value: String) -> [String; 5] {
    [method.into(), ue.into(), split.into(), metric.into(), value]
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Cell-wise mean of reports with identical layout, one per seed. A
    /// metric missing in some seeds averages over the seeds that have it.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| Error::invalid("no reports to average"))?;
        let same_layout = reports.iter().all(|r| {
            r.bin_count == first.bin_count
                && r.rows.len() == first.rows.len()
                && r.abstention_curves.len() == first.abstention_curves.len()
                && r.ood.len() == first.ood.len()
                && r.rows
                    .iter()
                    .zip(&first.rows)
                    .all(|(a, b)| (&a.method, &a.ue, &a.split) == (&b.method, &b.ue, &b.split))
                && r.abstention_curves.iter().zip(&first.abstention_curves).all(|(a, b)| {
                    (&a.method, &a.ue, &a.split, a.points.len()) == (&b.method, &b.ue, &b.split, b.points.len())
                })
                && r.ood
                    .iter()
                    .zip(&first.ood)
                    .all(|(a, b)| (&a.method, &a.ue, &a.split) == (&b.method, &b.ue, &b.split))
        });
        if !same_layout {
            return Err(Error::invalid("reports differ in layout and cannot be averaged"));
        }
        let rows = first
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let col = |f: fn(&MetricRow) -> Option<f64>| mean_opt(reports.iter().map(|x| f(&x.rows[i])));
                MetricRow {
                    f1: col(|m| m.f1),
                    ece: col(|m| m.ece),
                    spearman: col(|m| m.spearman),
                    auc: col(|m| m.auc),
                    aupr: col(|m| m.aupr),
                    brier: col(|m| m.brier),
                    ..r.clone()
                }
            })
            .collect();
        let abstention_curves = first
            .abstention_curves
            .iter()
            .enumerate()
            .map(|(i, c)| AbstentionCurve {
                points: c
                    .points
                    .iter()
                    .enumerate()
                    .map(|(j, p)| CurvePoint {
                        tau: p.tau,
                        f1: mean(reports.iter().map(|x| x.abstention_curves[i].points[j].f1)),
                    })
                    .collect(),
                ..c.clone()
            })
            .collect();
        let ood = first
            .ood
            .iter()
            .enumerate()
            .map(|(i, o)| OodRow {
                auc: mean(reports.iter().map(|x| x.ood[i].auc)),
                aupr: mean(reports.iter().map(|x| x.ood[i].aupr)),
                brier: mean(reports.iter().map(|x| x.ood[i].brier)),
                ..o.clone()
            })
            .collect();
        Ok(EvalReport {
            bin_count: first.bin_count,
            seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
            rows,
            abstention_curves,
            ood,
        })
    }

    pub fn row(&self, method: &str, ue: &str, split: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.ue == ue && r.split == split)
    }

    pub fn ood_row(&self, method: &str, ue: &str) -> Option<&OodRow> {
        self.ood.iter().find(|r| r.method == method && r.ue == ue)
    }

    /// Flat `method,ue,split,metric,value` table. Report-level fields use
    /// empty method/ue/split; missing values are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "ue", "split", "metric", "value"])?;
        w.write_record(cell("", "", "", "bin_count", self.bin_count.to_string()))?;
        for s in &self.seeds {
            w.write_record(cell("", "", "", "seed", s.to_string()))?;
        }
        for r in &self.rows {
            let f = |m: &str, v: Option<f64>| cell(&r.method, &r.ue, &r.split, m, serial::cell17(v));
            w.write_record(f("f1", r.f1))?;
            w.write_record(f("ece", r.ece))?;
            w.write_record(f("spearman", r.spearman))?;
            w.write_record(f("auc", r.auc))?;
            w.write_record(f("aupr", r.aupr))?;
            w.write_record(f("brier", r.brier))?;
        }
        for c in &self.abstention_curves {
            for p in &c.points {
                let metric = format!("{CURVE_PREFIX}{:.2}", p.tau);
                w.write_record(cell(&c.method, &c.ue, &c.split, &metric, serial::fmt17(p.f1)))?;
            }
        }
        for r in &self.ood {
            for (m, v) in [("auc", r.auc), ("aupr", r.aupr), ("brier", r.brier)] {
                let metric = format!("{OOD_PREFIX}{m}");
                w.write_record(cell(&r.method, &r.ue, &r.split, &metric, serial::fmt17(v)))?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let mut report = EvalReport {
            bin_count: DEFAULT_BIN_COUNT,
            seeds: Vec::new(),
            rows: Vec::new(),
            abstention_curves: Vec::new(),
            ood: Vec::new(),
        };
        let mut rows: Vec<(String, String, String, HashMap<String, Option<f64>>)> = Vec::new();
        let mut ood: Vec<(String, String, String, HashMap<String, f64>)> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(Error::format(format!("expected 5 columns, got {}", rec.len())));
            }
            let (method, ue, split, metric, value) = (&rec[0], &rec[1], &rec[2], &rec[3], &rec[4]);
            let num = || -> Result<Option<f64>> {
                serial::parse_cell(value).map_err(|e| Error::format(format!("bad value {value:?}: {e}")))
            };
            let required =
                || -> Result<f64> { num()?.ok_or_else(|| Error::format(format!("missing value for {metric}"))) };
            let key = (method.to_string(), ue.to_string(), split.to_string());
            if metric == "bin_count" {
                report.bin_count = value.parse().map_err(|_| Error::format("bad bin_count"))?;
            } else if metric == "seed" {
                report.seeds.push(value.parse().map_err(|_| Error::format("bad seed"))?);
            } else if let Some(tau) = metric.strip_prefix(CURVE_PREFIX) {
                let tau: f64 = tau.parse().map_err(|_| Error::format(format!("bad tau {tau:?}")))?;
                let point = CurvePoint { tau, f1: required()? };
                match report
                    .abstention_curves
                    .iter_mut()
                    .find(|c| (c.method.as_str(), c.ue.as_str(), c.split.as_str()) == (method, ue, split))
                {
                    Some(c) => c.points.push(point),
                    None => report.abstention_curves.push(AbstentionCurve {
                        method: key.0,
                        ue: key.1,
                        split: key.2,
                        points: vec![point],
                    }),
                }
            } else if let Some(m) = metric.strip_prefix(OOD_PREFIX) {
                let v = required()?;
                match ood
                    .iter_mut()
                    .find(|o| (o.0.as_str(), o.1.as_str(), o.2.as_str()) == (method, ue, split))
                {
                    Some(o) => {
                        o.3.insert(m.to_string(), v);
                    }
                    None => ood.push((key.0, key.1, key.2, HashMap::from([(m.to_string(), v)]))),
                }
            } else {
                let v = num()?;
                match rows
                    .iter_mut()
                    .find(|o| (o.0.as_str(), o.1.as_str(), o.2.as_str()) == (method, ue, split))
                {
                    Some(o) => {
                        o.3.insert(metric.to_string(), v);
                    }
                    None => rows.push((key.0, key.1, key.2, HashMap::from([(metric.to_string(), v)]))),
                }
            }
        }
        for (method, ue, split, m) in rows {
            let get = |k: &str| -> Result<Option<f64>> {
                m.get(k)
                    .copied()
                    .ok_or_else(|| Error::format(format!("{method}/{ue}/{split} lacks {k}")))
            };
            report.rows.push(MetricRow {
                f1: get("f1")?,
                ece: get("ece")?,
                spearman: get("spearman")?,
                auc: get("auc")?,
                aupr: get("aupr")?,
                brier: get("brier")?,
                method,
                ue,
                split,
            });
        }
        for (method, ue, split, m) in ood {
            let need = |k: &str| -> Result<f64> {
                m.get(k)
                    .copied()
                    .ok_or_else(|| Error::format(format!("{method}/{ue}/{split} lacks ood_{k}")))
            };
            report.ood.push(OodRow {
                auc: need("auc")?,
                aupr: need("aupr")?,
                brier: need("brier")?,
                method,
                ue,
                split,
            });
        }
        Ok(report)
    }
}
