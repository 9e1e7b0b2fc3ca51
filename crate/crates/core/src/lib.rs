//! Confidence metrics for selective classification, plus tools to elicit and
//! combine confidence signals from language models.
//!
//! - [`records`]: the prediction-record data model and its line-delimited file format.
//! - [`metrics`]: randomized and deterministic AUC, AUROC, ECE, coverage curves.
//! - [`composition`]: surrogate substitution, mixtures, tie-breaking, alpha sweeps.
//! - [`elicitation`]: prompt templates, answer/confidence parsing, chat-completion client.
//! - [`analysis`]: correctness correlation between models and confidence clustering.

pub mod analysis;
pub mod composition;
pub mod elicitation;
pub mod metrics;
pub mod records;

pub use metrics::{CurvePoint, MetricError, MetricReport, ScoredOutcome};
pub use records::{Label, PredictionRecord, RecordError, RecordSet};
