//! Prediction records: one line per question instance.
//!
//! A record carries the example identity, the gold and predicted answer
//! choices, the correctness bit and any number of named confidence columns.
//! Record files are UTF-8, one JSON object per line:
//!
//! ```text
//! {"example_id":"q1","dataset_id":"mmlu_law","gold":"B","pred":"B","confidences":{"linguistic":0.9}}
//! ```
//!
//! Labels are accepted as letters (`"A"`..`"Z"`) or 0-based integers and are
//! canonicalized to indices. `correct` may be omitted when both labels are
//! present.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde_json::{Map, Value};
use thiserror::Error;

/// Errors raised while ingesting or transforming record sets.
#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: score out of range for source `{source_name}`: {value}")]
    ScoreOutOfRange {
        line: usize,
        source_name: String,
        value: f64,
    },
    #[error("score out of range for source `{source_name}` on example `{example_id}`: {value}")]
    JoinScoreOutOfRange {
        source_name: String,
        example_id: String,
        value: f64,
    },
    #[error("line {line}: duplicate example_id `{example_id}` in dataset `{dataset_id}`")]
    DuplicateExample {
        line: usize,
        dataset_id: String,
        example_id: String,
    },
    #[error("line {line}: `correct` is {stated} but labels say {derived}")]
    InconsistentCorrectness {
        line: usize,
        stated: bool,
        derived: bool,
    },
    #[error("unknown example_id(s): {}", .0.join(", "))]
    OrphanKeys(Vec<String>),
    #[error("source `{0}` already present (pass overwrite to replace it)")]
    SourceExists(String),
    #[error("source `{source_name}` is missing for example(s): {}", .missing.join(", "))]
    MissingCoverage {
        source_name: String,
        missing: Vec<String>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// An answer choice, stored as a 0-based index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(pub usize);

impl Label {
    /// `'A'` maps to index 0. Lowercase letters are not accepted.
    pub fn from_letter(letter: char) -> Option<Self> {
        letter
            .is_ascii_uppercase()
            .then(|| Label((letter as u8 - b'A') as usize))
    }

    pub fn letter(self) -> Option<char> {
        (self.0 < 26).then(|| (b'A' + self.0 as u8) as char)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_json(value: &Value) -> Result<Self, String> {
        match value {
            Value::Number(n) => n
                .as_u64()
                .map(|i| Label(i as usize))
                .ok_or_else(|| format!("expected a non-negative integer, got {n}")),
            Value::String(s) => {
                let t = s.trim();
                let mut chars = t.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_uppercase() => Ok(Label::from_letter(c).unwrap()),
                    _ => t
                        .parse::<usize>()
                        .map(Label)
                        .map_err(|_| format!("expected a letter A-Z or an index, got {s:?}")),
                }
            }
            other => Err(format!("expected a letter or an integer, got {other}")),
        }
    }

    fn to_json(self) -> Value {
        match self.letter() {
            Some(c) => Value::String(c.to_string()),
            None => Value::from(self.0 as u64),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.letter() {
            Some(c) => write!(f, "{c}"),
            None => write!(f, "{}", self.0),
        }
    }
}

/// One question instance together with the model's answer and its confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub example_id: String,
    pub dataset_id: String,
    pub question: Option<String>,
    pub choices: Option<Vec<String>>,
    pub gold: Option<Label>,
    pub pred: Option<Label>,
    pub correct: bool,
    /// Source name to score in `[0, 1]`.
    pub confidences: BTreeMap<String, f64>,
    /// Diagnostic code for records whose generation could not be parsed.
    /// Such records are kept in files but excluded from metrics.
    pub failure: Option<String>,
    /// Raw generation text, when the record came from elicitation.
    pub raw: Option<String>,
}

impl PredictionRecord {
    /// A metrics-only record with no question content.
    pub fn new(example_id: impl Into<String>, dataset_id: impl Into<String>, correct: bool) -> Self {
        Self {
            example_id: example_id.into(),
            dataset_id: dataset_id.into(),
            question: None,
            choices: None,
            gold: None,
            pred: None,
            correct,
            confidences: BTreeMap::new(),
            failure: None,
            raw: None,
        }
    }

    pub fn with_confidence(mut self, source: impl Into<String>, score: f64) -> Self {
        self.confidences.insert(source.into(), score);
        self
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }

    fn from_json_line(line_no: usize, line: &str) -> Result<Self, RecordError> {
        let malformed = |field: &str, message: String| RecordError::Malformed {
            line: line_no,
            field: field.to_string(),
            message,
        };
        let value: Value =
            serde_json::from_str(line).map_err(|e| malformed("<line>", e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(malformed("<line>", "expected a JSON object".into()));
        };

        let req_str = |field: &str| -> Result<String, RecordError> {
            match obj.get(field) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(other) => Err(malformed(field, format!("expected a string, got {other}"))),
                None => Err(malformed(field, "missing".into())),
            }
        };
        let opt_str = |field: &str| -> Result<Option<String>, RecordError> {
            match obj.get(field) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(other) => Err(malformed(field, format!("expected a string, got {other}"))),
            }
        };
        let opt_label = |field: &str| -> Result<Option<Label>, RecordError> {
            match obj.get(field) {
                None | Some(Value::Null) => Ok(None),
                Some(v) => Label::from_json(v).map(Some).map_err(|m| malformed(field, m)),
            }
        };

        let example_id = req_str("example_id")?;
        let dataset_id = req_str("dataset_id")?;
        let question = opt_str("question")?;
        let failure = opt_str("failure")?;
        let raw = opt_str("raw")?;
        let choices = match obj.get("choices") {
            None | Some(Value::Null) => None,
            Some(Value::Array(items)) => Some(
                items
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => Ok(s.clone()),
                        other => Err(malformed("choices", format!("expected strings, got {other}"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            Some(other) => return Err(malformed("choices", format!("expected an array, got {other}"))),
        };
        let gold = opt_label("gold")?;
        let pred = opt_label("pred")?;

        let stated = match obj.get("correct") {
            None | Some(Value::Null) => None,
            Some(Value::Bool(b)) => Some(*b),
            Some(other) => return Err(malformed("correct", format!("expected a boolean, got {other}"))),
        };
        let derived = match (gold, pred) {
            (Some(g), Some(p)) => Some(g == p),
            _ => None,
        };
        let correct = match (stated, derived) {
            (Some(s), Some(d)) if s != d => {
                return Err(RecordError::InconsistentCorrectness {
                    line: line_no,
                    stated: s,
                    derived: d,
                })
            }
            (Some(s), _) => s,
            (None, Some(d)) => d,
            (None, None) => {
                return Err(malformed(
                    "correct",
                    "missing, and `gold`/`pred` are not both present to derive it".into(),
                ))
            }
        };

        let mut confidences = BTreeMap::new();
        match obj.get("confidences") {
            None | Some(Value::Null) => {}
            Some(Value::Object(map)) => {
                for (name, v) in map {
                    let score = v.as_f64().ok_or_else(|| {
                        malformed(&format!("confidences.{name}"), format!("expected a number, got {v}"))
                    })?;
                    if !(0.0..=1.0).contains(&score) {
                        return Err(RecordError::ScoreOutOfRange {
                            line: line_no,
                            source_name: name.clone(),
                            value: score,
                        });
                    }
                    // -0.0 and 0.0 are the same stored decimal.
                    confidences.insert(name.clone(), score + 0.0);
                }
            }
            Some(other) => {
                return Err(malformed("confidences", format!("expected an object, got {other}")))
            }
        }

        Ok(Self {
            example_id,
            dataset_id,
            question,
            choices,
            gold,
            pred,
            correct,
            confidences,
            failure,
            raw,
        })
    }

    /// Canonical JSON form: fixed field order, letters for labels below 26.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("example_id".into(), Value::String(self.example_id.clone()));
        obj.insert("dataset_id".into(), Value::String(self.dataset_id.clone()));
        if let Some(q) = &self.question {
            obj.insert("question".into(), Value::String(q.clone()));
        }
        if let Some(c) = &self.choices {
            obj.insert(
                "choices".into(),
                Value::Array(c.iter().cloned().map(Value::String).collect()),
            );
        }
        if let Some(g) = self.gold {
            obj.insert("gold".into(), g.to_json());
        }
        if let Some(p) = self.pred {
            obj.insert("pred".into(), p.to_json());
        }
        obj.insert("correct".into(), Value::Bool(self.correct));
        let confs: Map<String, Value> = self
            .confidences
            .iter()
            .map(|(k, v)| (k.clone(), Value::from(*v)))
            .collect();
        obj.insert("confidences".into(), Value::Object(confs));
        if let Some(f) = &self.failure {
            obj.insert("failure".into(), Value::String(f.clone()));
        }
        if let Some(r) = &self.raw {
            obj.insert("raw".into(), Value::String(r.clone()));
        }
        Value::Object(obj)
    }

    pub fn to_json_line(&self) -> String {
        self.to_json().to_string()
    }
}

/// An ordered, immutable collection of prediction records.
///
/// A set may span several datasets; `(dataset_id, example_id)` is unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordSet {
    records: Vec<PredictionRecord>,
    sources: BTreeSet<String>,
}

impl RecordSet {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self, RecordError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert((r.dataset_id.as_str(), r.example_id.as_str())) {
                return Err(RecordError::DuplicateExample {
                    line: i + 1,
                    dataset_id: r.dataset_id.clone(),
                    example_id: r.example_id.clone(),
                });
            }
            if let Some((name, &value)) = r.confidences.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(RecordError::ScoreOutOfRange {
                    line: i + 1,
                    source_name: name.clone(),
                    value,
                });
            }
        }
        Ok(Self::from_validated(records))
    }

    fn from_validated(records: Vec<PredictionRecord>) -> Self {
        let sources = records
            .iter()
            .flat_map(|r| r.confidences.keys().cloned())
            .collect();
        Self { records, sources }
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn sources(&self) -> &BTreeSet<String> {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct dataset ids in first-appearance order.
    pub fn dataset_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.dataset_id.as_str()))
            .map(|r| r.dataset_id.clone())
            .collect()
    }

    /// The dataset id when every record shares one.
    pub fn dataset_id(&self) -> Option<&str> {
        let first = self.records.first()?.dataset_id.as_str();
        self.records
            .iter()
            .all(|r| r.dataset_id == first)
            .then_some(first)
    }

    /// Splits into one set per dataset, in first-appearance order.
    pub fn partition(&self) -> Vec<(String, RecordSet)> {
        let ids = self.dataset_ids();
        let mut buckets: HashMap<&str, Vec<PredictionRecord>> = HashMap::new();
        for r in &self.records {
            buckets.entry(r.dataset_id.as_str()).or_default().push(r.clone());
        }
        ids.iter()
            .map(|id| {
                let recs = buckets.remove(id.as_str()).unwrap_or_default();
                (id.clone(), RecordSet::from_validated(recs))
            })
            .collect()
    }

    /// Records whose generation parsed; failures are dropped.
    pub fn without_failures(&self) -> RecordSet {
        RecordSet::from_validated(
            self.records.iter().filter(|r| !r.is_failure()).cloned().collect(),
        )
    }

    pub fn failure_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_failure()).count()
    }

    /// Records whose key is in `keep`, in original order.
    pub fn filter_examples(&self, keep: &HashSet<(String, String)>) -> RecordSet {
        RecordSet::from_validated(
            self.records
                .iter()
                .filter(|r| keep.contains(&(r.dataset_id.clone(), r.example_id.clone())))
                .cloned()
                .collect(),
        )
    }

    /// Fails with the ids of records that lack `source`.
    pub fn require_coverage(&self, source: &str) -> Result<(), RecordError> {
        let missing: Vec<String> = self
            .records
            .iter()
            .filter(|r| !r.confidences.contains_key(source))
            .map(|r| r.example_id.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(RecordError::MissingCoverage {
                source_name: source.to_string(),
                missing,
            })
        }
    }

    /// `(score, correct)` pairs for `source`, ordered by `(dataset_id, example_id)`.
    ///
    /// The fixed pre-sort makes every metric independent of file order.
    pub fn outcomes(&self, source: &str) -> Result<Vec<crate::metrics::ScoredOutcome>, RecordError> {
        self.require_coverage(source)?;
        let mut rows: Vec<&PredictionRecord> = self.records.iter().collect();
        rows.sort_by(|a, b| {
            (a.dataset_id.as_str(), a.example_id.as_str())
                .cmp(&(b.dataset_id.as_str(), b.example_id.as_str()))
        });
        Ok(rows
            .into_iter()
            .map(|r| crate::metrics::ScoredOutcome {
                score: r.confidences[source],
                correct: r.correct,
            })
            .collect())
    }

    /// Attaches `scores` (keyed by example_id) as column `source_name`.
    ///
    /// A key matches every record with that example_id, across datasets.
    /// Records without a key are left unchanged.
    pub fn join_confidence(
        &self,
        source_name: &str,
        scores: &HashMap<String, f64>,
        overwrite: bool,
    ) -> Result<RecordSet, RecordError> {
        if self.sources.contains(source_name) && !overwrite {
            return Err(RecordError::SourceExists(source_name.to_string()));
        }
        let known: HashSet<&str> = self.records.iter().map(|r| r.example_id.as_str()).collect();
        let mut orphans: Vec<String> = scores
            .keys()
            .filter(|k| !known.contains(k.as_str()))
            .cloned()
            .collect();
        if !orphans.is_empty() {
            orphans.sort();
            return Err(RecordError::OrphanKeys(orphans));
        }
        let mut bad: Vec<(&String, &f64)> = scores
            .iter()
            .filter(|(_, v)| !(0.0..=1.0).contains(*v))
            .collect();
        if !bad.is_empty() {
            bad.sort_by(|a, b| a.0.cmp(b.0));
            let (id, &value) = bad[0];
            return Err(RecordError::JoinScoreOutOfRange {
                source_name: source_name.to_string(),
                example_id: id.clone(),
                value,
            });
        }
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if let Some(&s) = scores.get(&r.example_id) {
                    r.confidences.insert(source_name.to_string(), s + 0.0);
                }
                r
            })
            .collect();
        Ok(RecordSet::from_validated(records))
    }

    pub fn summarize(&self) -> DatasetSummary {
        let count = self.records.len();
        let accuracy = (count > 0)
            .then(|| self.records.iter().filter(|r| r.correct).count() as f64 / count as f64);
        let sources = self
            .sources
            .iter()
            .map(|name| {
                let scores: Vec<f64> = self
                    .records
                    .iter()
                    .filter_map(|r| r.confidences.get(name).copied())
                    .collect();
                let summary = SourceSummary {
                    covered: scores.len(),
                    coverage: scores.len() as f64 / count as f64,
                    min: scores.iter().copied().fold(f64::INFINITY, f64::min),
                    max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                (name.clone(), summary)
            })
            .collect();
        DatasetSummary {
            count,
            failures: self.failure_count(),
            accuracy,
            sources,
        }
    }

    /// Writes one canonical JSON line per record.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", r.to_json_line())?;
        }
        out.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// Per-source column statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSummary {
    pub covered: usize,
    pub coverage: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub count: usize,
    pub failures: usize,
    /// `None` for an empty set.
    pub accuracy: Option<f64>,
    pub sources: BTreeMap<String, SourceSummary>,
}

/// Reads a line-delimited record stream. Blank lines are skipped.
pub fn parse_records<R: BufRead>(reader: R) -> Result<RecordSet, RecordError> {
    let mut records = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = PredictionRecord::from_json_line(i + 1, &line)?;
        if !seen.insert((record.dataset_id.clone(), record.example_id.clone())) {
            return Err(RecordError::DuplicateExample {
                line: i + 1,
                dataset_id: record.dataset_id,
                example_id: record.example_id,
            });
        }
        records.push(record);
    }
    Ok(RecordSet::from_validated(records))
}

pub fn parse_records_str(text: &str) -> Result<RecordSet, RecordError> {
    parse_records(text.as_bytes())
}

pub fn read_records_file(path: &std::path::Path) -> Result<RecordSet, RecordError> {
    let file = std::fs::File::open(path)?;
    parse_records(std::io::BufReader::new(file))
}
