//! Domain types shared by every stage of the pipeline and the two
//! probability primitives everything else is built on: temperature softmax
//! and Shannon entropy.
//!
//! All logarithms are natural. Argmax ties resolve to the lowest class index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums within this distance of one are accepted as stochastic.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;
/// Row sums within this distance of one are renormalized on construction;
/// anything further off is rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

/// Provenance of a sequence, used to build timeline / project / author splits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub timestamp: i64,
    pub project: String,
    pub author: String,
}

/// A pre-tokenized context with the token to predict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<u32>,
    pub meta: SequenceMeta,
    pub target: u32,
}

impl TokenSequence {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::invalid(format!("sequence {} has no tokens", self.id)));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::invalid(format!(
                "sequence {}: token {t} out of range for vocabulary of {vocab_size}",
                self.id
            )));
        }
        if self.target as usize >= vocab_size {
            return Err(Error::invalid(format!(
                "sequence {}: target {} out of range for vocabulary of {vocab_size}",
                self.id, self.target
            )));
        }
        Ok(())
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Dense row-major `N x C` matrix of finite logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    data: Vec<f64>,
    rows: usize,
    classes: usize,
}

impl LogitMatrix {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
        }
        if rows == 0 {
            return Err(Error::invalid("logit matrix needs at least one row"));
        }
        if data.len() != rows * classes {
            return Err(Error::invalid(format!(
                "logit buffer holds {} values, expected {rows}x{classes}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite logit at row {}, class {}",
                pos / classes,
                pos % classes
            )));
        }
        Ok(Self { data, rows, classes })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("ragged logit rows"));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    /// Element-wise arithmetic mean of equally shaped matrices, accumulated in
    /// slice order so the result does not depend on how members were produced.
    pub fn mean(members: &[LogitMatrix]) -> Result<LogitMatrix> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("mean of zero logit matrices"))?;
        if members
            .iter()
            .any(|m| m.rows != first.rows || m.classes != first.classes)
        {
            return Err(Error::invalid("member logit matrices differ in shape"));
        }
        // Incremental mean, exact when every member is equal.
        let mut acc = vec![0.0; first.data.len()];
        for (k, m) in members.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(&m.data) {
                *a += (v - *a) / (k + 1) as f64;
            }
        }
        LogitMatrix::new(first.rows, first.classes, acc)
    }
}

/// Dense row-major `N x C` matrix whose rows are probability distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    data: Vec<f64>,
    rows: usize,
    classes: usize,
}

impl ProbMatrix {
    /// Validates entries and row sums. Rows off by more than
    /// [`ROW_SUM_TOLERANCE`] but at most [`RENORMALIZE_TOLERANCE`] are rescaled
    /// to sum to one; rows within tolerance are stored bit-for-bit.
    pub fn new(rows: usize, classes: usize, mut data: Vec<f64>) -> Result<Self> {
        if classes < 2 || rows == 0 {
            return Err(Error::invalid(format!(
                "probability matrix must be at least 1x2, got {rows}x{classes}"
            )));
        }
        if data.len() != rows * classes {
            return Err(Error::invalid(format!(
                "probability buffer holds {} values, expected {rows}x{classes}",
                data.len()
            )));
        }
        for (i, row) in data.chunks_exact_mut(classes).enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("row {i}: entry {v} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
                return Err(Error::invalid(format!("row {i} sums to {sum}")));
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Ok(Self { data, rows, classes })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("ragged probability rows"));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    /// Row maxima (the winning-score confidence of each sample).
    pub fn confidences(&self) -> Vec<f64> {
        self.iter_rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Writes the temperature softmax of `logits` into `out`.
///
/// The row maximum is subtracted before exponentiation, so rows with very
/// large logits stay finite.
pub fn softmax_row(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax(logits: &LogitMatrix, temperature: f64) -> Result<ProbMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let c = logits.classes();
    let mut data = vec![0.0; logits.as_slice().len()];
    for (row, out) in logits.iter_rows().zip(data.chunks_exact_mut(c)) {
        softmax_row(row, temperature, out);
    }
    Ok(ProbMatrix {
        data,
        rows: logits.rows(),
        classes: c,
    })
}

/// Natural-log entropy of a distribution, with `0 ln 0 = 0`.
pub fn shannon_entropy(row: &[f64]) -> Result<f64> {
    if let Some(v) = row.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!("negative or non-finite probability {v}")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(Error::invalid(format!("distribution sums to {sum}")));
    }
    Ok(entropy_unchecked(row))
}

pub(crate) fn entropy_unchecked(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// One evaluated sample: calibrated prediction, its confidence and the
/// uncertainty a scorer assigned to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub predicted: usize,
    pub confidence: f64,
    pub label: usize,
    pub uncertainty: f64,
    pub correct: bool,
}

impl PredictionRecord {
    /// Builds one record per row. `uncertainty` defaults to the winning score
    /// `1 - confidence` when not supplied.
    pub fn collect(probs: &ProbMatrix, labels: &[usize], uncertainty: Option<&[f64]>) -> Result<Vec<PredictionRecord>> {
        if labels.len() != probs.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} probability rows",
                labels.len(),
                probs.rows()
            )));
        }
        if let Some(u) = uncertainty {
            if u.len() != probs.rows() {
                return Err(Error::invalid("uncertainty length differs from row count"));
            }
        }
        Ok(probs
            .iter_rows()
            .zip(labels)
            .enumerate()
            .map(|(i, (row, &label))| {
                let predicted = argmax(row);
                let confidence = row[predicted];
                PredictionRecord {
                    predicted,
                    confidence,
                    label,
                    uncertainty: uncertainty.map_or(1.0 - confidence, |u| u[i]),
                    correct: predicted == label,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_row(row: Vec<f64>, t: f64) -> Vec<f64> {
        softmax(&LogitMatrix::from_rows(&[row]).unwrap(), t)
            .unwrap()
            .row(0)
            .to_vec()
    }

    #[test]
    fn softmax_symmetric_row() {
        assert_eq!(one_row(vec![0.0, 0.0], 1.0), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_ln2_row() {
        let p = one_row(vec![2f64.ln(), 0.0], 1.0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let l = LogitMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(softmax(&l, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax(&l, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = one_row(vec![1e300, 0.0, -1e300], 1.0);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn heating_raises_entropy_keeps_argmax() {
        let row = vec![0.3, 2.1, -0.7, 1.4];
        let mut last = -1.0;
        for t in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0] {
            let p = one_row(row.clone(), t);
            assert_eq!(argmax(&p), 1);
            let h = shannon_entropy(&p).unwrap();
            assert!(h > last);
            last = h;
        }
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((shannon_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(shannon_entropy(&[1.5, -0.5]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn prob_matrix_renormalizes_small_drift_only() {
        let p = ProbMatrix::from_rows(&[vec![0.5 + 5e-7, 0.5]]).unwrap();
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(ProbMatrix::from_rows(&[vec![0.5 + 1e-4, 0.5]]).is_err());
        assert!(ProbMatrix::from_rows(&[vec![1.2, -0.2]]).is_err());
    }

    #[test]
    fn logit_matrix_invariants() {
        assert!(LogitMatrix::from_rows(&[vec![1.0]]).is_err());
        assert!(LogitMatrix::from_rows(&[vec![1.0, f64::NAN]]).is_err());
        assert!(LogitMatrix::from_rows(&[]).is_err());
    }

    #[test]
    fn records_follow_rows() {
        let p = ProbMatrix::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let r = PredictionRecord::collect(&p, &[1, 1], None).unwrap();
        assert!(r[0].correct && !r[1].correct);
        assert_eq!(r[1].confidence, 0.6);
        assert!((r[1].uncertainty - 0.4).abs() < 1e-15);
    }

    fn logit_rows() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-30.0f64..30.0, 2..12)
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_temperature(row in logit_rows(), t in 0.01f64..100.0) {
            let l = LogitMatrix::from_rows(std::slice::from_ref(&row)).unwrap();
            let p = softmax(&l, t).unwrap();
            prop_assert_eq!(argmax(p.row(0)), argmax(&row));
        }

        #[test]
        fn softmax_shift_invariant(row in logit_rows(), shift in -50.0f64..50.0, t in 0.1f64..10.0) {
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let a = softmax(&LogitMatrix::from_rows(&[row]).unwrap(), t).unwrap();
            let b = softmax(&LogitMatrix::from_rows(&[shifted]).unwrap(), t).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_stochastic(row in logit_rows(), t in 0.05f64..20.0) {
            let p = softmax(&LogitMatrix::from_rows(&[row]).unwrap(), t).unwrap();
            prop_assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < ROW_SUM_TOLERANCE);
        }

        #[test]
        fn entropy_permutation_invariant(row in logit_rows(), rot in 0usize..12) {
            let p = softmax(&LogitMatrix::from_rows(&[row]).unwrap(), 1.0).unwrap().row(0).to_vec();
            let mut q = p.clone();
            let k = rot % q.len();
            q.rotate_left(k);
            q.reverse();
            let a = shannon_entropy(&p).unwrap();
            let b = shannon_entropy(&q).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a <= (p.len() as f64).ln() + 1e-12);
        }
    }
}
