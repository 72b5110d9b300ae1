//! Per-sample uncertainty scores. Every score is oriented so that larger
//! means less trustworthy; the dissector's profile validity is reported as
//! `1 - validity`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationResult, Method};
use crate::error::{Error, Result};
use crate::prob::{argmax, entropy_unchecked, shannon_entropy, ProbMatrix};
use crate::serial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UeScore {
    WS,
    Entropy,
    SWS,
    PV,
    BALD,
    LCR,
    #[serde(rename = "SPV-Linear")]
    SpvLinear,
    #[serde(rename = "SPV-Log")]
    SpvLog,
    #[serde(rename = "SPV-Exp")]
    SpvExp,
}

impl UeScore {
    pub const ALL: [UeScore; 9] = [
        UeScore::WS,
        UeScore::Entropy,
        UeScore::SWS,
        UeScore::PV,
        UeScore::BALD,
        UeScore::LCR,
        UeScore::SpvLinear,
        UeScore::SpvLog,
        UeScore::SpvExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UeScore::WS => "WS",
            UeScore::Entropy => "Entropy",
            UeScore::SWS => "SWS",
            UeScore::PV => "PV",
            UeScore::BALD => "BALD",
            UeScore::LCR => "LCR",
            UeScore::SpvLinear => "SPV-Linear",
            UeScore::SpvLog => "SPV-Log",
            UeScore::SpvExp => "SPV-Exp",
        }
    }

    /// Calibration methods whose output this score is defined on.
    pub fn compatible_methods(self) -> &'static [Method] {
        match self {
            UeScore::WS => &[Method::Vanilla],
            UeScore::Entropy => &[Method::TS],
            UeScore::SWS | UeScore::PV | UeScore::BALD => &[Method::MCD, Method::DE],
            UeScore::LCR => &[Method::MT],
            UeScore::SpvLinear | UeScore::SpvLog | UeScore::SpvExp => &[Method::DS],
        }
    }

    pub fn is_compatible(self, method: Method) -> bool {
        self.compatible_methods().contains(&method)
    }

    pub fn for_method(method: Method) -> Vec<UeScore> {
        UeScore::ALL.into_iter().filter(|s| s.is_compatible(method)).collect()
    }

    pub fn growth(self) -> Option<Growth> {
        match self {
            UeScore::SpvLinear => Some(Growth::Linear),
            UeScore::SpvLog => Some(Growth::Log),
            UeScore::SpvExp => Some(Growth::Exp),
            _ => None,
        }
    }
}

impl fmt::Display for UeScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UeScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| x.to_ascii_lowercase().replace(['-', '_'], "");
        UeScore::ALL
            .into_iter()
            .find(|u| norm(u.name()) == norm(s))
            .ok_or_else(|| Error::invalid(format!("unknown uncertainty score {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyVector {
    pub method: UeScore,
    pub values: Vec<f64>,
    /// True when every value is guaranteed to lie in `[0, 1]`.
    pub normalized: bool,
}

impl UncertaintyVector {
    fn new(method: UeScore, values: Vec<f64>, normalized: bool) -> Self {
        Self {
            method,
            values,
            normalized,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values mapped into `[0, 1]`: entropy-valued scores are divided by
    /// `ln C`, everything else is already bounded.
    pub fn unit_interval(&self, classes: usize) -> Vec<f64> {
        match self.method {
            UeScore::Entropy | UeScore::BALD => {
                let max = (classes as f64).ln();
                self.values.iter().map(|v| (v / max).clamp(0.0, 1.0)).collect()
            }
            _ => self.values.clone(),
        }
    }

    /// CSV rows `sample_id,method,ue_name,value`.
    pub fn write_csv<W: Write>(&self, method: &str, out: W) -> Result<()> {
        write_csv(&[(method, self)], out)
    }
}

/// Writes several vectors into one `sample_id,method,ue_name,value` table.
pub fn write_csv<W: Write>(vectors: &[(&str, &UncertaintyVector)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "method", "ue_name", "value"])?;
    for (method, u) in vectors {
        for (i, v) in u.values.iter().enumerate() {
            w.write_record([&i.to_string(), *method, u.method.name(), &serial::fmt17(*v)])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Incremental mean; exact when every input is equal.
fn running_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (n, x) in xs.enumerate() {
        mean += (x - mean) / (n + 1) as f64;
    }
    mean
}

/// `1 - max_c p(c)`.
pub fn winning_score(result: &CalibrationResult) -> UncertaintyVector {
    let values = result.probs.iter_rows().map(|r| 1.0 - row_max(r)).collect();
    UncertaintyVector::new(UeScore::WS, values, true)
}

/// Entropy of the temperature-scaled distribution.
pub fn ts_entropy(result: &CalibrationResult) -> Result<UncertaintyVector> {
    if result.method != Method::TS {
        return Err(Error::invalid(format!(
            "entropy score expects a TS result, got {}",
            result.method
        )));
    }
    let values = result
        .probs
        .iter_rows()
        .map(shannon_entropy)
        .collect::<Result<Vec<_>>>()?;
    Ok(UncertaintyVector::new(UeScore::Entropy, values, false))
}

fn members(result: &CalibrationResult) -> Result<&[ProbMatrix]> {
    match &result.member_probs {
        Some(m) if m.len() >= 2 => Ok(m),
        Some(m) => Err(Error::invalid(format!("need at least 2 members, got {}", m.len()))),
        None => Err(Error::invalid(format!(
            "{} result carries no member distributions",
            result.method
        ))),
    }
}

/// `1 - mean_t max_c p_t(c)`.
pub fn sampled_winning_score(result: &CalibrationResult) -> Result<UncertaintyVector> {
    let ms = members(result)?;
    let values = (0..result.rows())
        .map(|i| 1.0 - running_mean(ms.iter().map(|m| row_max(m.row(i)))))
        .collect();
    Ok(UncertaintyVector::new(UeScore::SWS, values, true))
}

/// Population variance of each class probability across members, averaged
/// over classes.
pub fn probability_variance(result: &CalibrationResult) -> Result<UncertaintyVector> {
    let ms = members(result)?;
    let c = result.probs.classes();
    let values = (0..result.rows())
        .map(|i| {
            let mut total = 0.0;
            for k in 0..c {
                // Welford: identical members give exactly zero.
                let (mut mean, mut m2) = (0.0, 0.0);
                for (n, m) in ms.iter().enumerate() {
                    let x = m.row(i)[k];
                    let d = x - mean;
                    mean += d / (n + 1) as f64;
                    m2 += d * (x - mean);
                }
                total += m2 / ms.len() as f64;
            }
            total / c as f64
        })
        .collect();
    Ok(UncertaintyVector::new(UeScore::PV, values, true))
}

/// Mutual information: entropy of the member mean minus the mean member
/// entropy, clamped at zero.
pub fn bald(result: &CalibrationResult) -> Result<UncertaintyVector> {
    let ms = members(result)?;
    let c = result.probs.classes();
    let mut mean = vec![0.0; c];
    let values = (0..result.rows())
        .map(|i| {
            mean.iter_mut().for_each(|v| *v = 0.0);
            let mut member_entropy = 0.0;
            for (n, m) in ms.iter().enumerate() {
                let row = m.row(i);
                let w = 1.0 / (n + 1) as f64;
                for (acc, p) in mean.iter_mut().zip(row) {
                    *acc += (p - *acc) * w;
                }
                member_entropy += (entropy_unchecked(row) - member_entropy) * w;
            }
            (entropy_unchecked(&mean) - member_entropy).max(0.0)
        })
        .collect();
    Ok(UncertaintyVector::new(UeScore::BALD, values, false))
}

/// Fraction of mutants whose label differs from the original model's.
pub fn label_change_rate(result: &CalibrationResult, baseline_labels: &[usize]) -> Result<UncertaintyVector> {
    let mutants = result
        .member_labels
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} result carries no mutant labels", result.method)))?;
    label_change_rate_from(mutants, baseline_labels)
}

pub fn label_change_rate_from(mutants: &[Vec<usize>], baseline_labels: &[usize]) -> Result<UncertaintyVector> {
    if mutants.is_empty() {
        return Err(Error::invalid("no mutants"));
    }
    if let Some(m) = mutants.iter().find(|m| m.len() != baseline_labels.len()) {
        return Err(Error::invalid(format!(
            "mutant labels cover {} samples, baseline {}",
            m.len(),
            baseline_labels.len()
        )));
    }
    let n = mutants.len() as f64;
    let values = baseline_labels
        .iter()
        .enumerate()
        .map(|(i, &y)| mutants.iter().filter(|m| m[i] != y).count() as f64 / n)
        .collect();
    Ok(UncertaintyVector::new(UeScore::LCR, values, true))
}

/// How uniquely one snapshot distribution supports `predicted`.
///
/// If `predicted` is the snapshot's argmax this is `p / (p + p_second)`,
/// otherwise `1 - p_top / (p + p_top)`.
pub fn snapshot_validity(row: &[f64], predicted: usize) -> f64 {
    let top = argmax(row);
    let p = row[predicted];
    if top == predicted {
        let second = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != predicted)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if p + second > 0.0 {
            p / (p + second)
        } else {
            1.0
        }
    } else {
        1.0 - row[top] / (p + row[top])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Linear,
    Log,
    Exp,
}

/// Layer weight parameters for profile validity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub w: f64,
    pub beta: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self { w: 1.0, beta: 1.0 }
    }
}

/// Weight of the snapshot at 1-based position `x`.
pub fn layer_weight(growth: Growth, params: WeightParams, x: usize) -> f64 {
    let x = x as f64;
    match growth {
        Growth::Linear => params.w * x + 1.0,
        Growth::Log => params.w * (params.beta * x + 1.0).ln() + 1.0,
        Growth::Exp => params.w * (params.beta * x).exp() + 1.0,
    }
}

/// `1 - sum_l a_l SV_l / sum_l a_l` over snapshots ordered input to output,
/// with `predicted` the original model's labels.
pub fn spv(
    result: &CalibrationResult,
    predicted: &[usize],
    growth: Growth,
    params: WeightParams,
) -> Result<UncertaintyVector> {
    let snapshots = result
        .member_probs
        .as_ref()
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::invalid(format!("{} result carries no snapshots", result.method)))?;
    spv_from(snapshots, predicted, growth, params)
}

pub fn spv_from(
    snapshots: &[ProbMatrix],
    predicted: &[usize],
    growth: Growth,
    params: WeightParams,
) -> Result<UncertaintyVector> {
    let weights: Vec<f64> = (1..=snapshots.len()).map(|x| layer_weight(growth, params, x)).collect();
    if let Some(a) = weights.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::invalid(format!("non-positive snapshot weight {a}")));
    }
    if let Some(s) = snapshots.iter().find(|s| s.rows() != predicted.len()) {
        return Err(Error::invalid(format!(
            "snapshot covers {} samples, predictions {}",
            s.rows(),
            predicted.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    let values = predicted
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let conf = snapshots
                .iter()
                .zip(&weights)
                .map(|(s, a)| a * snapshot_validity(s.row(i), y))
                .sum::<f64>()
                / total;
            (1.0 - conf).clamp(0.0, 1.0)
        })
        .collect();
    let ue = match growth {
        Growth::Linear => UeScore::SpvLinear,
        Growth::Log => UeScore::SpvLog,
        Growth::Exp => UeScore::SpvExp,
    };
    Ok(UncertaintyVector::new(ue, values, true))
}

/// Computes `score` on `result`. `baseline` holds the unmodified model's
/// predicted labels, needed by LCR and SPV.
pub fn score(
    score: UeScore,
    result: &CalibrationResult,
    baseline: &[usize],
    spv_params: WeightParams,
) -> Result<UncertaintyVector> {
    if !score.is_compatible(result.method) {
        return Err(Error::invalid(format!(
            "incompatible method/ue pair: {}/{}",
            result.method, score
        )));
    }
    match score {
        UeScore::WS => Ok(winning_score(result)),
        UeScore::Entropy => ts_entropy(result),
        UeScore::SWS => sampled_winning_score(result),
        UeScore::PV => probability_variance(result),
        UeScore::BALD => bald(result),
        UeScore::LCR => label_change_rate(result, baseline),
        UeScore::SpvLinear | UeScore::SpvLog | UeScore::SpvExp => {
            spv(result, baseline, score.growth().expect("spv growth"), spv_params)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{CalibrationParams, Overhead};
    use crate::prob::{softmax, LogitMatrix};
    use proptest::prelude::*;

    fn result(method: Method, probs: Vec<Vec<f64>>, members: Option<Vec<Vec<Vec<f64>>>>) -> CalibrationResult {
        CalibrationResult {
            method,
            params: CalibrationParams::default(),
            overhead: Overhead::default(),
            logits: None,
            probs: ProbMatrix::from_rows(&probs).unwrap(),
            member_probs: members.map(|ms| ms.iter().map(|m| ProbMatrix::from_rows(m).unwrap()).collect()),
            member_labels: None,
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn winning_score_cases() {
        let r = result(
            Method::Vanilla,
            vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.25; 4], vec![0.6, 0.3, 0.1, 0.0]],
            None,
        );
        let u = winning_score(&r).values;
        assert_eq!(u[0], 0.0);
        assert!(close(u[1], 0.75));
        assert!(close(u[2], 0.4));
    }

    #[test]
    fn entropy_cases() {
        let r = result(Method::TS, vec![vec![1.0, 0.0], vec![0.5, 0.5]], None);
        let u = ts_entropy(&r).unwrap();
        assert!(!u.normalized);
        assert_eq!(u.values[0], 0.0);
        assert!(close(u.values[1], 2f64.ln()));
        let hot = softmax(&LogitMatrix::from_rows(&[vec![3.0, -1.0, 0.5]]).unwrap(), 1e6).unwrap();
        let r = CalibrationResult {
            probs: hot,
            ..result(Method::TS, vec![vec![0.5, 0.5]], None)
        };
        assert!((ts_entropy(&r).unwrap().values[0] - 3f64.ln()).abs() < 1e-9);
        let base = result(Method::Vanilla, vec![vec![0.5, 0.5]], None);
        assert!(matches!(ts_entropy(&base), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sampled_winning_score_cases() {
        let one_hot = vec![vec![0.0, 1.0]];
        let r = result(Method::MCD, vec![vec![0.0, 1.0]], Some(vec![one_hot.clone(), one_hot]));
        assert_eq!(sampled_winning_score(&r).unwrap().values[0], 0.0);

        let r = result(
            Method::MCD,
            vec![vec![0.8, 0.2]],
            Some(vec![vec![vec![0.9, 0.1]], vec![vec![0.3, 0.7]]]),
        );
        assert!(close(sampled_winning_score(&r).unwrap().values[0], 0.2));

        let missing = result(Method::MCD, vec![vec![0.5, 0.5]], None);
        assert!(matches!(
            sampled_winning_score(&missing),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn disagreement_extremes() {
        let r = result(
            Method::DE,
            vec![vec![0.5, 0.5]],
            Some(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]),
        );
        assert!(close(probability_variance(&r).unwrap().values[0], 0.25));
        assert!(close(bald(&r).unwrap().values[0], 2f64.ln()));

        let same = vec![vec![0.7, 0.2, 0.1]];
        let r = result(Method::DE, same.clone(), Some(vec![same.clone(), same.clone(), same]));
        assert_eq!(probability_variance(&r).unwrap().values[0], 0.0);
        assert_eq!(bald(&r).unwrap().values[0], 0.0);
        assert!(close(
            sampled_winning_score(&r).unwrap().values[0],
            winning_score(&r).values[0]
        ));
    }

    #[test]
    fn label_change_rate_cases() {
        let baseline = vec![1, 2, 0];
        let same: Vec<Vec<usize>> = vec![baseline.clone(); 100];
        assert_eq!(label_change_rate_from(&same, &baseline).unwrap().values, vec![0.0; 3]);
        let mut quarter = same.clone();
        for m in quarter.iter_mut().take(25) {
            m[0] = 0;
        }
        for m in quarter.iter_mut() {
            m[2] = 1;
        }
        let u = label_change_rate_from(&quarter, &baseline).unwrap().values;
        assert_eq!(u, vec![0.25, 0.0, 1.0]);
        assert!(matches!(
            label_change_rate_from(&[vec![0, 1]], &baseline),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn snapshot_validity_cases() {
        assert!(close(snapshot_validity(&[0.6, 0.3, 0.1], 0), 2.0 / 3.0));
        assert!(close(snapshot_validity(&[0.5, 0.25, 0.25], 1), 1.0 / 3.0));
        // Tie between predicted and runner-up, from either branch.
        assert!(close(snapshot_validity(&[0.4, 0.4, 0.2], 0), 0.5));
        assert!(close(snapshot_validity(&[0.4, 0.4, 0.2], 1), 0.5));
    }

    #[test]
    fn spv_cases() {
        let lin = WeightParams::default();
        let s1 = ProbMatrix::from_rows(&[vec![0.6, 0.3, 0.1]]).unwrap();
        let u = spv_from(std::slice::from_ref(&s1), &[0], Growth::Linear, lin).unwrap();
        assert!(close(u.values[0], 1.0 / 3.0));

        for g in [Growth::Linear, Growth::Log, Growth::Exp] {
            let u = spv_from(&[s1.clone(), s1.clone(), s1.clone()], &[0], g, lin).unwrap();
            assert!(close(u.values[0], 1.0 / 3.0));
        }

        // Snapshot validities 0.2 and 0.8 with linear weights 2 and 3.
        let a = ProbMatrix::from_rows(&[vec![0.2, 0.8]]).unwrap();
        let b = ProbMatrix::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let u = spv_from(&[a, b], &[0], Growth::Linear, lin).unwrap();
        assert!(close(u.values[0], 0.44));

        let bad = WeightParams { w: -5.0, beta: 1.0 };
        assert!(matches!(
            spv_from(std::slice::from_ref(&s1), &[0], Growth::Linear, bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn compatibility_matrix() {
        assert_eq!(UeScore::for_method(Method::Vanilla), vec![UeScore::WS]);
        assert_eq!(UeScore::for_method(Method::TS), vec![UeScore::Entropy]);
        assert_eq!(
            UeScore::for_method(Method::MCD),
            vec![UeScore::SWS, UeScore::PV, UeScore::BALD]
        );
        assert_eq!(UeScore::for_method(Method::DE), UeScore::for_method(Method::MCD));
        assert_eq!(UeScore::for_method(Method::MT), vec![UeScore::LCR]);
        assert_eq!(UeScore::for_method(Method::DS).len(), 3);
        let r = result(Method::TS, vec![vec![0.5, 0.5]], None);
        let err = score(UeScore::LCR, &r, &[0], WeightParams::default()).unwrap_err();
        assert!(err.to_string().contains("TS/LCR"));
        assert_eq!("spv_log".parse::<UeScore>().unwrap(), UeScore::SpvLog);
    }

    #[test]
    fn csv_layout() {
        let u = UncertaintyVector::new(UeScore::PV, vec![0.25, 0.0], true);
        let mut out = Vec::new();
        u.write_csv("MCD", &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "sample_id,method,ue_name,value\n0,MCD,PV,2.5000000000000000e-1\n1,MCD,PV,0.0000000000000000e0\n"
        );
    }

    fn distribution(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, c).prop_map(|l| {
            softmax(&LogitMatrix::from_rows(&[l]).unwrap(), 1.0)
                .unwrap()
                .row(0)
                .to_vec()
        })
    }

    fn members_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..6).prop_flat_map(|c| prop::collection::vec(distribution(c), 2..8))
    }

    /// Two-pass population variance, written independently of the scorer.
    fn pv_oracle(ms: &[Vec<f64>]) -> f64 {
        let c = ms[0].len();
        let t = ms.len() as f64;
        let mut out = 0.0;
        for k in 0..c {
            let col: Vec<f64> = ms.iter().map(|m| m[k]).collect();
            let mean = col.iter().sum::<f64>() / t;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t;
            out += var;
        }
        out / c as f64
    }

    proptest! {
        #[test]
        fn member_scores_in_range(ms in members_strategy(), sv_growth in 0usize..3) {
            let c = ms[0].len();
            let mean: Vec<f64> = (0..c).map(|k| ms.iter().map(|m| m[k]).sum::<f64>() / ms.len() as f64).collect();
            let r = result(Method::MCD, vec![mean.clone()], Some(ms.iter().map(|m| vec![m.clone()]).collect()));
            let sws = sampled_winning_score(&r).unwrap().values[0];
            let pv = probability_variance(&r).unwrap().values[0];
            let b = bald(&r).unwrap().values[0];
            prop_assert!((0.0..=1.0).contains(&sws));
            prop_assert!((0.0..=0.25).contains(&pv));
            prop_assert!((pv - pv_oracle(&ms)).abs() < 1e-12);
            prop_assert!(b >= 0.0);
            prop_assert!(b <= entropy_unchecked(&mean) + 1e-12);
            prop_assert!(b <= (c as f64).ln() + 1e-12);

            let growth = [Growth::Linear, Growth::Log, Growth::Exp][sv_growth];
            let snaps: Vec<ProbMatrix> = ms.iter().map(|m| ProbMatrix::from_rows(std::slice::from_ref(m)).unwrap()).collect();
            for y in 0..c {
                let u = spv_from(&snaps, &[y], growth, WeightParams::default()).unwrap().values[0];
                prop_assert!((0.0..=1.0).contains(&u));
                for s in &snaps {
                    let sv = snapshot_validity(s.row(0), y);
                    prop_assert!((0.0..=1.0).contains(&sv));
                }
            }
        }

        #[test]
        fn spv_invariant_to_weight_scaling(ms in members_strategy(), scale in 0.1f64..10.0) {
            let snaps: Vec<ProbMatrix> = ms.iter().map(|m| ProbMatrix::from_rows(std::slice::from_ref(m)).unwrap()).collect();
            let alphas: Vec<f64> = (1..=snaps.len()).map(|x| layer_weight(Growth::Exp, WeightParams::default(), x)).collect();
            let weighted = |a: &[f64]| -> f64 {
                let total: f64 = a.iter().sum();
                1.0 - snaps.iter().zip(a).map(|(s, w)| w * snapshot_validity(s.row(0), 0)).sum::<f64>() / total
            };
            let scaled: Vec<f64> = alphas.iter().map(|a| a * scale).collect();
            let direct = spv_from(&snaps, &[0], Growth::Exp, WeightParams::default()).unwrap().values[0];
            prop_assert!((weighted(&alphas) - direct).abs() < 1e-12);
            prop_assert!((weighted(&scaled) - direct).abs() < 1e-12);
        }

        #[test]
        fn identical_members_collapse(row in distribution(4), t in 2usize..6) {
            let r = result(Method::DE, vec![row.clone()], Some(vec![vec![row.clone()]; t]));
            prop_assert!((sampled_winning_score(&r).unwrap().values[0] - winning_score(&r).values[0]).abs() < 1e-12);
            prop_assert!(probability_variance(&r).unwrap().values[0].abs() < 1e-15);
            prop_assert!(bald(&r).unwrap().values[0].abs() < 1e-12);
        }
    }
}
