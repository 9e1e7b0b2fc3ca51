//! Pulling an answer letter and a confidence out of free text.
//!
//! Matching is line-oriented. Answer letters must be uppercase so that the
//! English article "a" is never read as choice A.

use std::sync::LazyLock;

use regex::Regex;

use super::prompt::{ConfidenceFormat, PromptTemplate};
use super::FailureCode;
use crate::records::Label;

static ANSWER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:\banswer)(?:\s+is)?\**\s*[:=\-]?\**\s*[\(\[*]{0,2}([A-Z])(?:$|[^A-Za-z0-9])").unwrap()
});

static SHORT_ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*A\s*:\s*[\(\[*]{0,2}([A-Z])(?:$|[^A-Za-z0-9])").unwrap());

static BARE_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*[\(\[*]{0,2}([A-Z])[\)\]*.]{0,2}\s*$").unwrap());

static CONFIDENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bconf(?:idence)?\b(?:\s+(?:score|level))?(?:\s+is)?\**\s*[:=\-]?\**\s*(.*)$").unwrap()
});

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[\(\[*'\x22]{0,3}([-+]?(?:\d+(?:\.\d*)?|\.\d+))").unwrap());

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedAnswer {
    pub label: Option<Label>,
    pub confidence: Option<f64>,
    /// Set exactly when `label` or `confidence` is absent.
    pub failure: Option<FailureCode>,
}

impl ParsedAnswer {
    pub fn ok(&self) -> Option<(Label, f64)> {
        Some((self.label?, self.confidence?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Conf {
    Value(f64),
    OutOfRange,
    Unrecognized,
}

fn pick<T: Copy>(found: &[T], last: bool) -> Option<T> {
    if last {
        found.last().copied()
    } else {
        found.first().copied()
    }
}

fn find_label(lines: &[&str], n_choices: usize, last: bool) -> Option<Label> {
    let valid = |caps: regex::Captures| {
        let l = Label::from_letter(caps[1].chars().next()?)?;
        (l.index() < n_choices).then_some(l)
    };
    let prefixed: Vec<Label> = lines
        .iter()
        .flat_map(|line| {
            let mut hits: Vec<Label> = ANSWER.captures_iter(line).filter_map(valid).collect();
            if hits.is_empty() {
                hits.extend(SHORT_ANSWER.captures(line).and_then(valid));
            }
            hits
        })
        .collect();
    if !prefixed.is_empty() {
        return pick(&prefixed, last);
    }
    let bare: Vec<Label> = lines
        .iter()
        .filter_map(|line| BARE_LETTER.captures(line).and_then(valid))
        .collect();
    pick(&bare, last)
}

fn categorical_regex(cats: &[(String, f64)]) -> Regex {
    let mut labels: Vec<&str> = cats.iter().map(|(l, _)| l.as_str()).collect();
    // Leftmost match wins; among matches at one position the longest phrase
    // does, so "not sure" beats "sure".
    labels.sort_by_key(|l| std::cmp::Reverse(l.len()));
    let alts: Vec<String> = labels.iter().map(|l| regex::escape(l.trim())).collect();
    Regex::new(&format!(r"(?i)(?:^|\b)({})(?:$|\b)", alts.join("|"))).unwrap()
}

fn read_confidence(tail: &str, format: &ConfidenceFormat, cat_re: Option<&Regex>) -> Conf {
    match format {
        ConfidenceFormat::Categorical(cats) => {
            let re = cat_re.expect("categorical regex");
            match re.captures(tail) {
                Some(c) => {
                    let hit = c[1].to_lowercase();
                    cats.iter()
                        .find(|(l, _)| l.trim().to_lowercase() == hit)
                        .map_or(Conf::Unrecognized, |(_, s)| Conf::Value(*s))
                }
                None => Conf::Unrecognized,
            }
        }
        ConfidenceFormat::UnitInterval | ConfidenceFormat::Percent => {
            let Some(c) = NUMBER.captures(tail.trim_start()) else {
                return Conf::Unrecognized;
            };
            let percent = matches!(format, ConfidenceFormat::Percent);
            // "33.3" read as "33.3e-2" rounds once from the decimal text; dividing
            // by 100 afterwards would round twice.
            let text = if percent { format!("{}e-2", &c[1]) } else { c[1].to_string() };
            let Ok(v) = text.parse::<f64>() else {
                return Conf::Unrecognized;
            };
            if !(0.0..=1.0).contains(&v) {
                return Conf::OutOfRange;
            }
            // "-0" parses to -0.0.
            Conf::Value(if v == 0.0 { 0.0 } else { v })
        }
    }
}

/// Answer letter among the first `n_choices` and the confidence, per the
/// template's format. Never panics on arbitrary text.
pub fn parse_answer_confidence(raw: &str, n_choices: usize, template: &PromptTemplate) -> ParsedAnswer {
    let last = template.chain_of_thought;
    let lines: Vec<&str> = raw.lines().collect();
    let label = find_label(&lines, n_choices.min(26), last);

    let cat_re = match &template.confidence_format {
        ConfidenceFormat::Categorical(cats) if !cats.is_empty() => Some(categorical_regex(cats)),
        _ => None,
    };
    let confs: Vec<Conf> = lines
        .iter()
        .filter_map(|line| CONFIDENCE.captures(line))
        .map(|c| match (&template.confidence_format, &cat_re) {
            (ConfidenceFormat::Categorical(_), None) => Conf::Unrecognized,
            (f, re) => read_confidence(&c[1], f, re.as_ref()),
        })
        .filter(|c| *c != Conf::Unrecognized)
        .collect();
    let conf = pick(&confs, last).unwrap_or(Conf::Unrecognized);

    let (confidence, conf_failure) = match conf {
        Conf::Value(v) => (Some(v), None),
        Conf::OutOfRange => (None, Some(FailureCode::ConfidenceRange)),
        Conf::Unrecognized => (None, Some(FailureCode::ConfidenceMissing)),
    };
    let failure = if label.is_none() {
        Some(FailureCode::LabelMissing)
    } else {
        conf_failure
    };
    ParsedAnswer {
        label,
        confidence,
        failure,
    }
}
