//! Fixed 17-significant-digit number formatting for JSON and CSV artifacts.
//!
//! Seventeen significant digits identify every `f64` uniquely, so anything
//! written here parses back to the identical bit pattern.

use serde::ser::{Serialize, SerializeSeq, Serializer};
use serde_json::value::RawValue;

/// Formats `x` in scientific notation with 17 significant digits. Non-finite
/// values have no JSON representation and render as `null`.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

/// CSV cell for an optional number; missing values are an empty cell.
pub fn cell17(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => fmt17(v),
        _ => String::new(),
    }
}

pub fn parse_cell(s: &str) -> Result<Option<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

struct Num17(f64);

impl Serialize for Num17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(fmt17(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

struct Row17<'a>(&'a [f64]);

impl Serialize for Row17<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for &v in self.0 {
            seq.serialize_element(&Num17(v))?;
        }
        seq.end()
    }
}

pub fn f64_17<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    Num17(*x).serialize(s)
}

pub fn opt_f64_17<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => Num17(*v).serialize(s),
        None => s.serialize_none(),
    }
}

pub fn vec_f64_17<S: Serializer>(x: &[f64], s: S) -> Result<S::Ok, S::Error> {
    Row17(x).serialize(s)
}

pub fn matrix_17<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(rows.len()))?;
    for r in rows {
        seq.serialize_element(&Row17(r))?;
    }
    seq.end()
}

pub fn opt_matrices_17<S: Serializer>(members: &Option<Vec<Vec<Vec<f64>>>>, s: S) -> Result<S::Ok, S::Error> {
    struct Matrix<'a>(&'a [Vec<f64>]);
    impl Serialize for Matrix<'_> {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            matrix_17(self.0, s)
        }
    }
    match members {
        None => s.serialize_none(),
        Some(ms) => {
            let mut seq = s.serialize_seq(Some(ms.len()))?;
            for m in ms {
                seq.serialize_element(&Matrix(m))?;
            }
            seq.end()
        }
    }
}
