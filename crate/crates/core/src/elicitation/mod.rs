//! Asking a chat model for an answer and a confidence, and reading both back.
//!
//! Rendering and parsing are pure functions; [`provider::ChatClient`] does the
//! network side. A generation that cannot be parsed is data, carried as a
//! [`FailureCode`] on the result rather than an error.

pub mod logprob;
pub mod parse;
pub mod prompt;
pub mod provider;

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::records::{Label, PredictionRecord};

pub use logprob::answer_probability;
pub use parse::{parse_answer_confidence, ParsedAnswer};
pub use prompt::{render_compliant_completion, render_prompt, ConfidenceFormat, PromptTemplate, TEMPLATE_IDS};
pub use provider::{ChatClient, Completion, ProviderConfig};

#[derive(Debug, Error)]
pub enum ElicitationError {
    #[error("invalid template {0}")]
    InvalidTemplate(String),
    #[error("a question needs at least one choice")]
    NoChoices,
    #[error("{0} choices; at most 26 can be lettered")]
    TooManyChoices(usize),
    #[error("provider config: {0}")]
    Config(String),
    #[error("request failed after {attempts} attempt(s){}: {message}", status_suffix(.status))]
    Transport {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("questions line {line}: {message}")]
    Questions { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn status_suffix(status: &Option<u16>) -> String {
    status.map(|s| format!(" (last status {s})")).unwrap_or_default()
}

impl ElicitationError {
    /// Network-side failures, as opposed to bad input or configuration.
    pub fn is_transport(&self) -> bool {
        matches!(self, ElicitationError::Transport { .. } | ElicitationError::Protocol(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureCode {
    LabelMissing,
    ConfidenceMissing,
    ConfidenceRange,
    LogprobMissing,
}

impl FailureCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureCode::LabelMissing => "LABEL_MISSING",
            FailureCode::ConfidenceMissing => "CONFIDENCE_MISSING",
            FailureCode::ConfidenceRange => "CONFIDENCE_RANGE",
            FailureCode::LogprobMissing => "LOGPROB_MISSING",
        }
    }
}

impl fmt::Display for FailureCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElicitationResult {
    pub raw_text: String,
    pub parsed_label: Option<Label>,
    pub parsed_confidence: Option<f64>,
    /// Probability of the chosen letter, when log-probabilities were requested.
    pub choice_probability: Option<f64>,
    /// Set exactly when the label or the confidence is absent.
    pub failure: Option<FailureCode>,
    /// Why `choice_probability` is absent although it was requested.
    pub probability_failure: Option<FailureCode>,
}

impl ElicitationResult {
    /// A record for `item`. The parsed confidence goes in column `source`, the
    /// answer probability (if any) in `probability_source`.
    pub fn to_record(&self, item: &QuestionItem, source: &str, probability_source: Option<&str>) -> PredictionRecord {
        let mut confidences = BTreeMap::new();
        if let Some(c) = self.parsed_confidence {
            confidences.insert(source.to_string(), c);
        }
        if let (Some(name), Some(p)) = (probability_source, self.choice_probability) {
            confidences.insert(name.to_string(), p);
        }
        PredictionRecord {
            example_id: item.example_id.clone(),
            dataset_id: item.dataset_id.clone(),
            question: Some(item.question.clone()),
            choices: Some(item.choices.clone()),
            gold: Some(item.gold),
            pred: self.parsed_label,
            correct: self.parsed_label == Some(item.gold),
            confidences,
            failure: self.failure.map(|f| f.as_str().to_string()),
            raw: Some(self.raw_text.clone()),
        }
    }
}

/// One line of a question file: `example_id`, `dataset_id`, `question`,
/// `choices` and `gold` (a letter or a 0-based index).
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionItem {
    pub example_id: String,
    pub dataset_id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub gold: Label,
}

fn question_from_json(line: usize, text: &str) -> Result<QuestionItem, ElicitationError> {
    let err = |message: String| ElicitationError::Questions { line, message };
    let v: Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
    let string = |key: &str| -> Result<String, ElicitationError> {
        match obj.get(key) {
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(Value::Number(n)) if key.ends_with("_id") => Ok(n.to_string()),
            _ => Err(err(format!("`{key}` must be a nonempty string"))),
        }
    };
    let choices: Vec<String> = match obj.get("choices") {
        Some(Value::Array(a)) => a
            .iter()
            .map(|c| c.as_str().map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| err("`choices` must be a list of strings".into()))?,
        _ => return Err(err("`choices` must be a list of strings".into())),
    };
    if choices.is_empty() || choices.len() > 26 {
        return Err(err(format!("need 1 to 26 choices, got {}", choices.len())));
    }
    let gold = obj
        .get("gold")
        .ok_or_else(|| err("missing `gold`".into()))
        .and_then(|g| Label::from_json(g).map_err(|m| err(format!("`gold`: {m}"))))?;
    if gold.index() >= choices.len() {
        return Err(err(format!("`gold` {gold} is not among {} choices", choices.len())));
    }
    Ok(QuestionItem {
        example_id: string("example_id")?,
        dataset_id: string("dataset_id")?,
        question: string("question")?,
        choices,
        gold,
    })
}

/// Parse a line-delimited question file. Blank lines are skipped.
pub fn parse_questions<R: BufRead>(reader: R) -> Result<Vec<QuestionItem>, ElicitationError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q = question_from_json(i + 1, &line)?;
        if !seen.insert((q.dataset_id.clone(), q.example_id.clone())) {
            return Err(ElicitationError::Questions {
                line: i + 1,
                message: format!("duplicate example {}/{}", q.dataset_id, q.example_id),
            });
        }
        out.push(q);
    }
    Ok(out)
}
