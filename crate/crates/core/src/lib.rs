//! Uncertainty calibration and estimation for token classifiers under
//! distribution shift.
//!
//! The crate is organised as a pipeline:
//!
//! - [`prob`]: shared domain types, softmax and entropy
//! - [`refmodel`]: a small trainable classifier with dropout, layer taps and
//!   mutation operators
//! - [`calibrate`]: vanilla, temperature scaling, MC dropout, deep ensemble,
//!   mutation testing and dissector calibration
//! - [`estimate`]: per-sample uncertainty scores
//! - [`metrics`]: ECE, rank correlation, AUC / AUPR / Brier, sub-token F1,
//!   selective prediction and OOD detection
//! - [`shift`]: corpus ingestion, shifted split construction and shift
//!   intensity
//! - [`harness`]: config-driven end-to-end runs and report assembly

pub mod calibrate;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod metrics;
pub mod prob;
pub mod refmodel;
pub mod serial;
pub mod shift;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use estimate::{UeScore, UncertaintyVector};
pub use harness::{MethodSpec, OverheadTable, RunConfig};
pub use metrics::EvalReport;
pub use prob::{
    argmax, shannon_entropy, softmax, LogitMatrix, PredictionRecord, ProbMatrix, SequenceMeta, TokenSequence,
};
pub use refmodel::{Checkpoint, ForwardTrace, ModelConfig, MutationOperator, MutationSpec};
pub use shift::{Pattern, ShiftReport, ShiftedCorpus, SplitName, SynthSpec};
