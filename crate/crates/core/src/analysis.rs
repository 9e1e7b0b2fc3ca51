//! Diagnostics over record sets: how alike two models' mistakes are, and how
//! clustered a confidence column is.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::records::{RecordError, RecordSet};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AnalysisError {
    #[error("only {0} shared example(s); need at least 2")]
    TooLittleOverlap(usize),
    #[error("CONSTANT_VECTOR: correctness of `{0}` is constant on the shared examples")]
    ConstantVector(String),
    #[error("source `{source_name}` is missing for {missing} record(s)")]
    MissingCoverage { source_name: String, missing: usize },
    #[error("no records")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub model_a: String,
    pub model_b: String,
    pub n: usize,
    pub pearson_r: f64,
    /// Sample covariance (divides by `n - 1`).
    pub covariance: f64,
}

/// Paired correctness bits over examples present in both sets, matched on
/// `(dataset_id, example_id)`, in sorted key order.
fn paired_correctness(a: &RecordSet, b: &RecordSet) -> Vec<(bool, bool)> {
    let in_b: HashMap<(&str, &str), bool> = b
        .records()
        .iter()
        .map(|r| ((r.dataset_id.as_str(), r.example_id.as_str()), r.correct))
        .collect();
    let mut pairs: Vec<((&str, &str), bool, bool)> = a
        .records()
        .iter()
        .filter_map(|r| {
            let key = (r.dataset_id.as_str(), r.example_id.as_str());
            in_b.get(&key).map(|&cb| (key, r.correct, cb))
        })
        .collect();
    pairs.sort_by(|x, y| x.0.cmp(&y.0));
    pairs.into_iter().map(|(_, x, y)| (x, y)).collect()
}

/// Pearson correlation and covariance of the two models' correctness.
pub fn correctness_correlation(
    a: &RecordSet,
    b: &RecordSet,
    name_a: &str,
    name_b: &str,
) -> Result<CorrelationReport, AnalysisError> {
    let pairs = paired_correctness(a, b);
    let n = pairs.len() as i128;
    if n < 2 {
        return Err(AnalysisError::TooLittleOverlap(pairs.len()));
    }
    // Bits square to themselves, so every moment is an integer count.
    let sx = pairs.iter().filter(|p| p.0).count() as i128;
    let sy = pairs.iter().filter(|p| p.1).count() as i128;
    let sxy = pairs.iter().filter(|p| p.0 && p.1).count() as i128;
    let vx = n * sx - sx * sx;
    let vy = n * sy - sy * sy;
    if vx == 0 {
        return Err(AnalysisError::ConstantVector(name_a.to_string()));
    }
    if vy == 0 {
        return Err(AnalysisError::ConstantVector(name_b.to_string()));
    }
    let cov_num = n * sxy - sx * sy;
    // Integer products up to n^4; the square root is exact for perfect squares.
    let pearson_r = (cov_num as f64 / ((vx as f64) * (vy as f64)).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationReport {
        model_a: name_a.to_string(),
        model_b: name_b.to_string(),
        n: pairs.len(),
        pearson_r,
        covariance: cov_num as f64 / (n * (n - 1)) as f64,
    })
}

/// Correlation pooled over all shared examples, per dataset, and the mean of
/// the per-dataset values that are defined.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationBreakdown {
    pub pooled: Result<CorrelationReport, AnalysisError>,
    pub per_dataset: Vec<(String, Result<CorrelationReport, AnalysisError>)>,
    pub mean_per_dataset: Option<f64>,
}

pub fn correlation_breakdown(a: &RecordSet, b: &RecordSet, name_a: &str, name_b: &str) -> CorrelationBreakdown {
    let pooled = correctness_correlation(a, b, name_a, name_b);
    let b_parts: HashMap<String, RecordSet> = b.partition().into_iter().collect();
    let per_dataset: Vec<(String, Result<CorrelationReport, AnalysisError>)> = a
        .partition()
        .into_iter()
        .filter_map(|(id, part)| {
            b_parts
                .get(&id)
                .map(|other| (id.clone(), correctness_correlation(&part, other, name_a, name_b)))
        })
        .collect();
    let defined: Vec<f64> = per_dataset
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().map(|r| r.pearson_r))
        .collect();
    let mean_per_dataset = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    CorrelationBreakdown {
        pooled,
        per_dataset,
        mean_per_dataset,
    }
}

/// Pooled Pearson r for every pair of named sets, as CSV with model names on
/// both axes. Undefined entries are left empty.
pub fn correlation_matrix_csv(sets: &[(String, RecordSet)]) -> String {
    let mut out = String::from("model");
    for (name, _) in sets {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name_a, a) in sets {
        out.push_str(name_a);
        for (name_b, b) in sets {
            out.push(',');
            if let Ok(r) = correctness_correlation(a, b, name_a, name_b) {
                out.push_str(&r.pearson_r.to_string());
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionStats {
    pub source: String,
    pub n: usize,
    pub unique_values: usize,
    /// Most frequent score; the smallest one when counts tie.
    pub mode_value: f64,
    pub mode_share: f64,
}

/// Exact distinct-value count of a confidence column, with its mode.
pub fn confidence_distribution_stats(set: &RecordSet, source: &str) -> Result<DistributionStats, AnalysisError> {
    if set.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let outcomes = set.outcomes(source).map_err(|e| match e {
        RecordError::MissingCoverage { source_name, missing } => AnalysisError::MissingCoverage {
            source_name,
            missing: missing.len(),
        },
        other => unreachable!("coverage check only fails on coverage: {other}"),
    })?;
    // Non-negative floats order the same as their bit patterns.
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for o in &outcomes {
        *counts.entry(o.score.to_bits()).or_default() += 1;
    }
    let (&mode_bits, &mode_count) = counts
        .iter()
        .rev()
        .max_by_key(|(_, &c)| c)
        .expect("non-empty");
    Ok(DistributionStats {
        source: source.to_string(),
        n: outcomes.len(),
        unique_values: counts.len(),
        mode_value: f64::from_bits(mode_bits),
        mode_share: mode_count as f64 / outcomes.len() as f64,
    })
}
