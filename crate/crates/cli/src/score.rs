use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::Serialize;
use selconf_core::metrics::{auc_monte_carlo, metric_report, CurvePoint};
use selconf_core::records::RecordSet;

use crate::commands::{read_records, write_file};
use crate::{data, usage, CliResult, ScoreArgs};

#[derive(Debug, Serialize)]
pub struct ReportRow {
    pub dataset_id: String,
    pub source: String,
    pub n: usize,
    /// Unparsed generations left out of every metric.
    pub failures_excluded: usize,
    pub accuracy: f64,
    pub auc_randomized: f64,
    pub auc_deterministic: f64,
    pub auroc: Option<f64>,
    pub ece: Option<f64>,
    pub bins: usize,
    pub auc_mc: Option<f64>,
    pub auc_mc_std_error: Option<f64>,
    pub mc_trials: Option<usize>,
    pub seed: u64,
}

/// One row per `(dataset_id, source)`, with the full coverage curve.
pub fn score_rows(
    set: &RecordSet,
    sources: &[String],
    bins: usize,
    mc_trials: Option<usize>,
    seed: u64,
) -> anyhow::Result<Vec<(ReportRow, Vec<CurvePoint>)>> {
    for s in sources {
        if !set.sources().contains(s) {
            return Err(anyhow!("source `{s}` not found in input"));
        }
    }
    let mut rows = Vec::new();
    for (dataset_id, part) in set.partition() {
        let failures = part.failure_count();
        let scored = part.without_failures();
        if scored.is_empty() {
            return Err(anyhow!("dataset `{dataset_id}` has no parsed records to score"));
        }
        for source in sources {
            let outcomes = scored
                .outcomes(source)
                .map_err(|e| anyhow!("dataset `{dataset_id}`: {e}"))?;
            let report = metric_report(&outcomes, bins)?;
            let mc = mc_trials
                .map(|t| auc_monte_carlo(&outcomes, t, seed))
                .transpose()?;
            rows.push((
                ReportRow {
                    dataset_id: dataset_id.clone(),
                    source: source.clone(),
                    n: report.n,
                    failures_excluded: failures,
                    accuracy: report.accuracy,
                    auc_randomized: report.auc_randomized,
                    auc_deterministic: report.auc_deterministic,
                    auroc: report.auroc,
                    ece: report.ece,
                    bins,
                    auc_mc: mc.map(|m| m.mean),
                    auc_mc_std_error: mc.map(|m| m.std_error),
                    mc_trials,
                    seed,
                },
                report.curve,
            ));
        }
    }
    Ok(rows)
}

fn is_jsonl(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl") || e.eq_ignore_ascii_case("json"))
}

fn report_text(rows: &[&ReportRow], jsonl: bool) -> anyhow::Result<String> {
    if jsonl {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        return Ok(s);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn curves_dir(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    output.with_file_name(format!("{stem}_curves"))
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("coverage,selective_accuracy\n");
    for p in curve {
        let _ = writeln!(s, "{},{}", p.coverage, p.selective_accuracy);
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn markdown(rows: &[&ReportRow]) -> String {
    let mut s = String::from(
        "| dataset | source | n | failures | accuracy | AUC | AUC (det.) | AUROC | ECE |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {} | {} |",
            r.dataset_id,
            r.source,
            r.n,
            r.failures_excluded,
            r.accuracy,
            r.auc_randomized,
            r.auc_deterministic,
            opt(r.auroc),
            opt(r.ece)
        );
    }
    s
}

pub fn run(a: ScoreArgs) -> CliResult {
    if a.bins == 0 {
        return Err(usage(anyhow!("--bins must be positive")));
    }
    if a.mc_trials == Some(0) {
        return Err(usage(anyhow!("--mc-trials must be positive")));
    }
    let set = read_records(&a.input)?;
    let sources: Vec<String> = if a.source.is_empty() {
        set.sources().iter().cloned().collect()
    } else {
        a.source.clone()
    };
    if sources.is_empty() {
        return Err(data(anyhow!("input has no confidence columns")));
    }
    let rows = score_rows(&set, &sources, a.bins, a.mc_trials, a.seed).map_err(data)?;
    let plain: Vec<&ReportRow> = rows.iter().map(|(r, _)| r).collect();
    write_file(&a.output, &report_text(&plain, is_jsonl(&a.output)).map_err(data)?)?;
    let dir = curves_dir(&a.output);
    for (r, curve) in &rows {
        let file = dir.join(format!("{}__{}.csv", safe_name(&r.dataset_id), safe_name(&r.source)));
        write_file(&file, &curve_csv(curve))?;
    }
    print!("{}", markdown(&plain));
    Ok(())
}
