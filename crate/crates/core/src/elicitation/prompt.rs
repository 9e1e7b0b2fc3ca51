//! Prompt templates and rendering.
//!
//! The shipped `best` template is a reconstruction: the instruction wording is
//! our own, built around the known structure (a 0-1 confidence score plus a
//! block of placeholder "fake few-shot" examples answering D and A with
//! confidences 0.4 and 0.7). The other three templates are representative
//! alternates, not a catalogue.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ElicitationError;
use crate::records::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFormat {
    /// A decimal in [0, 1].
    UnitInterval,
    /// A percentage in [0, 100], stored divided by 100.
    Percent,
    /// One of a fixed set of phrases, each mapped to a score. Scores must be
    /// strictly increasing in list order.
    Categorical(Vec<(String, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub instruction_text: String,
    pub includes_fake_fewshot: bool,
    pub confidence_format: ConfidenceFormat,
    /// Reasoning comes before the final answer, so parsing takes the last
    /// answer and confidence rather than the first.
    pub chain_of_thought: bool,
}

pub const TEMPLATE_IDS: [&str; 4] = ["best", "categorical", "percent", "cot"];

const UNIT_INSTRUCTION: &str = "Answer the multiple-choice question below. \
Give the letter of the single best choice, then rate how confident you are that this answer is correct \
with a number between 0 and 1, where 0 means certainly wrong and 1 means certainly right.";

const FORMAT_TAIL: &str = "Reply with exactly two lines and nothing else:";

impl PromptTemplate {
    pub fn best() -> Self {
        PromptTemplate {
            template_id: "best".into(),
            instruction_text: UNIT_INSTRUCTION.into(),
            includes_fake_fewshot: true,
            confidence_format: ConfidenceFormat::UnitInterval,
            chain_of_thought: false,
        }
    }

    pub fn categorical() -> Self {
        PromptTemplate {
            template_id: "categorical".into(),
            instruction_text: "Answer the multiple-choice question below. \
Give the letter of the single best choice, then say how certain you are of it \
using exactly one of these phrases: 'not sure', 'sure', 'very sure'."
                .into(),
            includes_fake_fewshot: false,
            confidence_format: ConfidenceFormat::Categorical(vec![
                ("not sure".into(), 0.3),
                ("sure".into(), 0.7),
                ("very sure".into(), 0.9),
            ]),
            chain_of_thought: false,
        }
    }

    pub fn percent() -> Self {
        PromptTemplate {
            template_id: "percent".into(),
            instruction_text: "Answer the multiple-choice question below. \
Give the letter of the single best choice, then the probability, from 0% to 100%, that your answer is correct."
                .into(),
            includes_fake_fewshot: false,
            confidence_format: ConfidenceFormat::Percent,
            chain_of_thought: false,
        }
    }

    pub fn chain_of_thought() -> Self {
        PromptTemplate {
            template_id: "cot".into(),
            instruction_text: "Answer the multiple-choice question below. \
First reason about the question step by step. When you are done, give the letter of the single best choice \
and a number between 0 and 1 for how confident you are that it is correct."
                .into(),
            includes_fake_fewshot: false,
            confidence_format: ConfidenceFormat::UnitInterval,
            chain_of_thought: true,
        }
    }

    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            "best" => Some(Self::best()),
            "categorical" => Some(Self::categorical()),
            "percent" => Some(Self::percent()),
            "cot" => Some(Self::chain_of_thought()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ElicitationError> {
        if let ConfidenceFormat::Categorical(cats) = &self.confidence_format {
            let bad = |why: &str| Err(ElicitationError::InvalidTemplate(format!("{}: {why}", self.template_id)));
            if cats.is_empty() {
                return bad("categorical format needs at least one category");
            }
            if cats.iter().any(|(l, s)| l.trim().is_empty() || !(0.0..=1.0).contains(s)) {
                return bad("category labels must be nonempty with scores in [0, 1]");
            }
            if cats.windows(2).any(|w| w[0].1 >= w[1].1) {
                return bad("category scores must be strictly increasing");
            }
        }
        Ok(())
    }

    fn confidence_slot(&self) -> String {
        match &self.confidence_format {
            ConfidenceFormat::UnitInterval => "<a number between 0 and 1>".into(),
            ConfidenceFormat::Percent => "<a percentage between 0% and 100%>".into(),
            ConfidenceFormat::Categorical(cats) => {
                let names: Vec<String> = cats.iter().map(|(l, _)| format!("'{l}'")).collect();
                format!("<one of {}>", names.join(", "))
            }
        }
    }
}

/// `Label(0)` is "A". Callers guarantee `i < 26`.
fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

const FEWSHOT: &str = "Here are two examples that only show the expected format. \
Their questions and choices are placeholders.

Question: [example question 1]
A. [choice]
B. [choice]
C. [choice]
D. [choice]
Answer: D
Confidence: 0.4

Question: [example question 2]
A. [choice]
B. [choice]
C. [choice]
D. [choice]
Answer: A
Confidence: 0.7
";

/// Instruction, optional placeholder examples, the question with lettered
/// choices, and the answer/confidence slots.
pub fn render_prompt(question: &str, choices: &[String], template: &PromptTemplate) -> Result<String, ElicitationError> {
    template.validate()?;
    if choices.is_empty() {
        return Err(ElicitationError::NoChoices);
    }
    if choices.len() > 26 {
        return Err(ElicitationError::TooManyChoices(choices.len()));
    }
    let mut out = String::new();
    out.push_str(&template.instruction_text);
    out.push_str("\n\n");
    if template.includes_fake_fewshot {
        out.push_str(FEWSHOT);
        out.push('\n');
    }
    let _ = writeln!(out, "Question: {}", question.trim());
    for (i, c) in choices.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", letter(i), c.trim());
    }
    out.push('\n');
    if template.chain_of_thought {
        out.push_str("After your reasoning, end with these two lines:\n");
    } else {
        out.push_str(FORMAT_TAIL);
        out.push('\n');
    }
    let _ = writeln!(out, "Answer: <one letter from A to {}>", letter(choices.len() - 1));
    let _ = write!(out, "Confidence: {}", template.confidence_slot());
    Ok(out)
}

fn format_percent(confidence: f64) -> String {
    let s = format!("{:.10}", confidence * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

/// What a perfectly compliant model would reply. `None` when the confidence
/// cannot be expressed in the template's format (out of range, or not one of
/// the categorical scores).
pub fn render_compliant_completion(label: Label, confidence: f64, template: &PromptTemplate) -> Option<String> {
    let l = label.letter()?;
    if !(0.0..=1.0).contains(&confidence) {
        return None;
    }
    let conf = match &template.confidence_format {
        ConfidenceFormat::UnitInterval => confidence.to_string(),
        ConfidenceFormat::Percent => format_percent(confidence),
        ConfidenceFormat::Categorical(cats) => cats.iter().find(|(_, s)| *s == confidence)?.0.clone(),
    };
    let mut out = String::new();
    if template.chain_of_thought {
        // A tentative answer in the reasoning that the final lines override.
        let decoy = if label.index() == 0 { 'B' } else { 'A' };
        let _ = write!(
            out,
            "Let me look at each option in turn.\nAt first glance the answer looks like {decoy}.\nAnswer: {decoy}\n\
Confidence: 0.5\nOn reflection that reading is wrong.\n"
        );
    }
    let _ = write!(out, "Answer: {l}\nConfidence: {conf}");
    Some(out)
}
