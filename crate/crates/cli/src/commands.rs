use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, Context};
use selconf_core::analysis::{confidence_distribution_stats, correlation_breakdown, correlation_matrix_csv};
use selconf_core::composition::{
    compose_column, default_alpha_grid, sweep_alpha, sweep_alpha_holdout, tiebreak_column, MixtureSpec,
};
use selconf_core::records::{read_records_file, RecordSet};

use crate::{data, usage, AnalyzeArgs, CliResult, ComposeArgs, JoinArgs, SweepArgs, TiebreakArgs};

pub fn read_records(path: &Path) -> CliResult<RecordSet> {
    read_records_file(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data)
}

pub fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(data)?;
    }
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_score_csv(path: &Path, column: Option<&str>, source: &str) -> anyhow::Result<HashMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = find("example_id").ok_or_else(|| anyhow!("no `example_id` column"))?;
    let wanted = column.map(str::to_string).unwrap_or_else(|| {
        if find("score").is_some() {
            "score".into()
        } else {
            source.to_string()
        }
    });
    let score_col = find(&wanted).ok_or_else(|| anyhow!("no `{wanted}` column"))?;
    let mut out = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        let raw = row.get(score_col).unwrap_or("").trim();
        let v: f64 = raw
            .parse()
            .map_err(|_| anyhow!("line {line}: `{raw}` is not a number"))?;
        if out.insert(id.clone(), v).is_some() {
            return Err(anyhow!("line {line}: duplicate example_id {id}"));
        }
    }
    Ok(out)
}

fn read_score_records(path: &Path, column: &str) -> anyhow::Result<HashMap<String, f64>> {
    let set = read_records_file(path)?;
    let mut out = HashMap::new();
    for r in set.records() {
        if let Some(&v) = r.confidences.get(column) {
            if out.insert(r.example_id.clone(), v).is_some() {
                return Err(anyhow!("example_id {} appears in more than one dataset", r.example_id));
            }
        }
    }
    if out.is_empty() {
        return Err(anyhow!("no record carries column `{column}`"));
    }
    Ok(out)
}

pub fn join(a: JoinArgs) -> CliResult {
    let set = read_records(&a.input)?;
    let scores = if is_csv(&a.scores) {
        read_score_csv(&a.scores, a.column.as_deref(), &a.source)
    } else {
        read_score_records(&a.scores, a.column.as_deref().unwrap_or(&a.source))
    }
    .with_context(|| format!("reading {}", a.scores.display()))
    .map_err(data)?;
    let out = set.join_confidence(&a.source, &scores, a.overwrite).map_err(data)?;
    write_file(&a.output, &out.to_jsonl())?;
    eprintln!("joined {} score(s) as `{}`", scores.len(), a.source);
    Ok(())
}

pub fn compose(a: ComposeArgs) -> CliResult {
    let set = read_records(&a.input)?;
    let spec = MixtureSpec::new(a.main, a.aux, a.alpha).map_err(usage)?;
    let name = a.name.unwrap_or_else(|| spec.column_name());
    let out = compose_column(&set, &spec, Some(&name)).map_err(data)?;
    write_file(&a.output, &out.to_jsonl())?;
    println!("{name}");
    Ok(())
}

pub fn tiebreak(a: TiebreakArgs) -> CliResult {
    let set = read_records(&a.input)?;
    let name = a.name.unwrap_or_else(|| format!("tiebreak:{}+{}", a.main, a.aux));
    let out = tiebreak_column(&set, &a.main, &a.aux, Some(&name)).map_err(data)?;
    write_file(&a.output, &out.to_jsonl())?;
    println!("{name}");
    Ok(())
}

pub fn parse_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>().map_err(|_| anyhow!("bad alpha `{t}` in --grid"))
        })
        .collect()
}

pub fn sweep(a: SweepArgs) -> CliResult {
    let grid = match &a.grid {
        Some(g) => parse_grid(g).map_err(usage)?,
        None => default_alpha_grid(),
    };
    let set = read_records(&a.input)?;
    let (result, heldout) = match a.holdout {
        Some(f) => {
            let h = sweep_alpha_holdout(&set, &a.main, &a.aux, &grid, f, a.seed).map_err(data)?;
            (h.selection, Some((h.heldout_auc, h.heldout_examples)))
        }
        None => (sweep_alpha(&set, &a.main, &a.aux, &grid).map_err(data)?, None),
    };
    match &a.output {
        Some(p) => write_file(p, &result.to_csv())?,
        None => print!("{}", result.to_csv()),
    }
    println!("best_alpha={} best_auc={}", result.best_alpha, result.best_auc);
    if let Some((auc, n)) = heldout {
        println!("heldout_auc={auc} heldout_examples={n}");
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> CliResult {
    if !a.name.is_empty() && a.name.len() != a.input.len() {
        return Err(usage(anyhow!("{} --name value(s) for {} --input file(s)", a.name.len(), a.input.len())));
    }
    let mut sets = Vec::new();
    for (i, path) in a.input.iter().enumerate() {
        let name = a.name.get(i).cloned().unwrap_or_else(|| {
            path.file_stem().map_or_else(|| format!("model{i}"), |s| s.to_string_lossy().into_owned())
        });
        sets.push((name, read_records(path)?.without_failures()));
    }

    if sets.len() >= 2 {
        println!("| model A | model B | n | pooled r | mean per-dataset r |");
        println!("|---|---|---|---|---|");
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                let (na, a_set) = &sets[i];
                let (nb, b_set) = &sets[j];
                let br = correlation_breakdown(a_set, b_set, na, nb);
                let (n, pooled) = match &br.pooled {
                    Ok(r) => (r.n.to_string(), format!("{:.4}", r.pearson_r)),
                    Err(e) => ("-".into(), e.to_string()),
                };
                let mean = br.mean_per_dataset.map_or("-".into(), |m| format!("{m:.4}"));
                println!("| {na} | {nb} | {n} | {pooled} | {mean} |");
            }
        }
        if let Some(p) = &a.output {
            write_file(p, &correlation_matrix_csv(&sets))?;
        }
    } else if a.output.is_some() {
        return Err(usage(anyhow!("a correlation matrix needs at least two --input files")));
    }

    if !a.source.is_empty() {
        println!();
        println!("| model | source | n | unique values | mode | mode share |");
        println!("|---|---|---|---|---|---|");
        for (name, set) in &sets {
            for source in &a.source {
                if !set.sources().contains(source) {
                    continue;
                }
                let s = confidence_distribution_stats(set, source).map_err(data)?;
                println!(
                    "| {name} | {source} | {} | {} | {} | {:.4} |",
                    s.n, s.unique_values, s.mode_value, s.mode_share
                );
            }
        }
    }
    Ok(())
}
