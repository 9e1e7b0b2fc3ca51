//! Composite confidence columns.
//!
//! A mixture takes the main model's confidence `c1` and an auxiliary
//! (surrogate) score `c2` and outputs `(1 - alpha) * c1 + alpha * c2`.
//! Surrogate substitution is the `alpha = 1` endpoint. Tie-breaking is a
//! mixture with a tiny alpha: `c1` still decides every strict ordering it
//! expresses, while `c2` orders examples that `c1` scores identically.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::metrics::{self, MetricError, ScoredOutcome};
use crate::records::{Label, RecordError, RecordSet};

/// Weight given to the auxiliary score when breaking ties.
pub const TIEBREAK_ALPHA: f64 = 0.001;

#[derive(Debug, Error)]
pub enum CompositionError {
    #[error("{what} {value} outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("main and auxiliary sources are both `{0}`")]
    SameSource(String),
    #[error("alpha grid is empty")]
    EmptyGrid,
    #[error("no samples to aggregate")]
    EmptySamples,
    #[error("holdout fraction {0} leaves no examples on one side of the split")]
    BadHoldout(f64),
    #[error("no scoreable records")]
    NoRecords,
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn check_unit(what: &'static str, value: f64) -> Result<f64, CompositionError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(CompositionError::OutOfRange { what, value })
    }
}

/// `(1 - alpha) * c1 + alpha * c2`.
///
/// The endpoints and `c1 == c2` return an input bit-for-bit; otherwise the
/// result is clamped to `[0, 1]` against rounding.
pub fn mix_scores(c1: f64, c2: f64, alpha: f64) -> Result<f64, CompositionError> {
    check_unit("c1", c1)?;
    check_unit("c2", c2)?;
    check_unit("alpha", alpha)?;
    Ok(mix_unchecked(c1, c2, alpha))
}

fn mix_unchecked(c1: f64, c2: f64, alpha: f64) -> f64 {
    if alpha == 0.0 || c1 == c2 {
        c1
    } else if alpha == 1.0 {
        c2
    } else {
        ((1.0 - alpha) * c1 + alpha * c2).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureSpec {
    pub main: String,
    pub aux: String,
    pub alpha: f64,
}

impl MixtureSpec {
    pub fn new(main: impl Into<String>, aux: impl Into<String>, alpha: f64) -> Result<Self, CompositionError> {
        let (main, aux) = (main.into(), aux.into());
        if main == aux {
            return Err(CompositionError::SameSource(main));
        }
        check_unit("alpha", alpha)?;
        Ok(Self { main, aux, alpha })
    }

    /// `mixture:<main>+<aux>@a=<alpha>`
    pub fn column_name(&self) -> String {
        format!("mixture:{}+{}@a={}", self.main, self.aux, self.alpha)
    }
}

/// Adds the mixed column. Failure records are passed through untouched;
/// every other record must carry both sources.
pub fn compose_column(
    set: &RecordSet,
    spec: &MixtureSpec,
    out_name: Option<&str>,
) -> Result<RecordSet, CompositionError> {
    let scored = set.without_failures();
    scored.require_coverage(&spec.main)?;
    scored.require_coverage(&spec.aux)?;
    let name = out_name.map(str::to_string).unwrap_or_else(|| spec.column_name());
    let mut out = Vec::with_capacity(set.len());
    for r in set.records() {
        let mut r = r.clone();
        if !r.is_failure() {
            let c = mix_unchecked(r.confidences[&spec.main], r.confidences[&spec.aux], spec.alpha);
            r.confidences.insert(name.clone(), c);
        }
        out.push(r);
    }
    Ok(RecordSet::new(out)?)
}

/// [`compose_column`] at [`TIEBREAK_ALPHA`].
pub fn tiebreak_column(
    set: &RecordSet,
    main: &str,
    aux: &str,
    out_name: Option<&str>,
) -> Result<RecordSet, CompositionError> {
    compose_column(set, &MixtureSpec::new(main, aux, TIEBREAK_ALPHA)?, out_name)
}

/// `0, 0.001, 0.05, 0.10, ..., 1`.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    grid.insert(1, TIEBREAK_ALPHA);
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSweepResult {
    /// `(alpha, auc)` in grid order.
    pub grid: Vec<(f64, f64)>,
    pub best_alpha: f64,
    pub best_auc: f64,
}

impl AlphaSweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,auc\n");
        for (a, auc) in &self.grid {
            s.push_str(&format!("{a},{auc}\n"));
        }
        s
    }
}

/// Per-dataset `(c1, c2, correct)` triples in `(dataset_id, example_id)` order.
struct Columns {
    partitions: Vec<Vec<(f64, f64, bool)>>,
}

impl Columns {
    fn extract(set: &RecordSet, main: &str, aux: &str) -> Result<Self, CompositionError> {
        if main == aux {
            return Err(CompositionError::SameSource(main.to_string()));
        }
        let scored = set.without_failures();
        if scored.is_empty() {
            return Err(CompositionError::NoRecords);
        }
        let mut partitions = Vec::new();
        for (_, part) in scored.partition() {
            let c1 = part.outcomes(main)?;
            let c2 = part.outcomes(aux)?;
            partitions.push(
                c1.iter()
                    .zip(&c2)
                    .map(|(a, b)| (a.score, b.score, a.correct))
                    .collect(),
            );
        }
        Ok(Self { partitions })
    }

    /// Randomized AUC of the mixture, averaged over datasets.
    fn mean_auc(&self, alpha: f64) -> Result<f64, MetricError> {
        let mut total = 0.0;
        for part in &self.partitions {
            let outcomes: Vec<ScoredOutcome> = part
                .iter()
                .map(|&(c1, c2, correct)| ScoredOutcome::new(mix_unchecked(c1, c2, alpha), correct))
                .collect();
            total += metrics::auc_randomized(&outcomes)?;
        }
        Ok(total / self.partitions.len() as f64)
    }

    fn sweep(&self, grid: &[f64]) -> Result<AlphaSweepResult, CompositionError> {
        if grid.is_empty() {
            return Err(CompositionError::EmptyGrid);
        }
        for &a in grid {
            check_unit("alpha", a)?;
        }
        let aucs: Vec<f64> = grid
            .par_iter()
            .map(|&a| self.mean_auc(a))
            .collect::<Result<_, _>>()?;
        let points: Vec<(f64, f64)> = grid.iter().copied().zip(aucs).collect();
        let best_auc = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let best_alpha = points
            .iter()
            .filter(|p| p.1 == best_auc)
            .map(|p| p.0)
            .fold(f64::INFINITY, f64::min);
        Ok(AlphaSweepResult {
            grid: points,
            best_alpha,
            best_auc,
        })
    }
}

/// Evaluates the mixture's randomized AUC at every grid alpha and keeps the
/// highest. Ties go to the smallest alpha. A set spanning several datasets
/// is scored by the mean of per-dataset AUCs.
pub fn sweep_alpha(
    set: &RecordSet,
    main: &str,
    aux: &str,
    grid: &[f64],
) -> Result<AlphaSweepResult, CompositionError> {
    Columns::extract(set, main, aux)?.sweep(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutSweep {
    /// Sweep over the selection split.
    pub selection: AlphaSweepResult,
    /// Mixture AUC at the selected alpha on the held-out split.
    pub heldout_auc: f64,
    pub heldout_examples: usize,
}

/// Chooses alpha on one part of the data and reports AUC on the rest.
///
/// Examples are shuffled with `seed`; the first `round(fraction * n)` are held out.
pub fn sweep_alpha_holdout(
    set: &RecordSet,
    main: &str,
    aux: &str,
    grid: &[f64],
    fraction: f64,
    seed: u64,
) -> Result<HoldoutSweep, CompositionError> {
    let scored = set.without_failures();
    let mut keys: Vec<(String, String)> = scored
        .records()
        .iter()
        .map(|r| (r.dataset_id.clone(), r.example_id.clone()))
        .collect();
    keys.sort();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = (fraction * keys.len() as f64).round() as usize;
    if !(0.0..1.0).contains(&fraction) || held == 0 || held == keys.len() {
        return Err(CompositionError::BadHoldout(fraction));
    }
    let heldout: HashSet<(String, String)> = keys[..held].iter().cloned().collect();
    let selection: HashSet<(String, String)> = keys[held..].iter().cloned().collect();

    let sweep = Columns::extract(&scored.filter_examples(&selection), main, aux)?.sweep(grid)?;
    let heldout_auc =
        Columns::extract(&scored.filter_examples(&heldout), main, aux)?.mean_auc(sweep.best_alpha)?;
    Ok(HoldoutSweep {
        selection: sweep,
        heldout_auc,
        heldout_examples: held,
    })
}

/// Majority label over sampled `(label, confidence)` generations, with the
/// mean confidence of the samples that voted for it.
///
/// Vote ties go to the higher mean confidence, then to the lower label.
pub fn aggregate_self_consistency(samples: &[(Label, f64)]) -> Result<(Label, f64), CompositionError> {
    if samples.is_empty() {
        return Err(CompositionError::EmptySamples);
    }
    let mut votes: BTreeMap<Label, (usize, f64)> = BTreeMap::new();
    for &(label, conf) in samples {
        check_unit("confidence", conf)?;
        let v = votes.entry(label).or_default();
        v.0 += 1;
        v.1 += conf;
    }
    // BTreeMap iterates labels ascending, so a strict `>` keeps the lowest on ties.
    let mut best: Option<(Label, usize, f64)> = None;
    for (label, (count, sum)) in votes {
        let mean = sum / count as f64;
        let better = match best {
            None => true,
            Some((_, c, m)) => count > c || (count == c && mean > m),
        };
        if better {
            best = Some((label, count, mean));
        }
    }
    let (label, _, mean) = best.expect("at least one sample");
    Ok((label, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::PredictionRecord;
    use approx::assert_abs_diff_eq;

    fn set(rows: &[(&str, bool, f64, f64)]) -> RecordSet {
        RecordSet::new(
            rows.iter()
                .map(|&(id, c, m, a)| {
                    PredictionRecord::new(id, "d", c)
                        .with_confidence("ling", m)
                        .with_confidence("sur", a)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mix_endpoints_and_interior() {
        assert_eq!(mix_scores(0.9, 0.62, 0.0).unwrap(), 0.9);
        assert_eq!(mix_scores(0.9, 0.62, 1.0).unwrap(), 0.62);
        assert_abs_diff_eq!(mix_scores(0.9, 0.62, 0.4).unwrap(), 0.6 * 0.9 + 0.4 * 0.62, epsilon = 1e-15);
        assert_abs_diff_eq!(mix_scores(0.9, 0.62, 0.4).unwrap(), 0.788, epsilon = 1e-12);
        assert!(matches!(
            mix_scores(1.2, 0.5, 0.5),
            Err(CompositionError::OutOfRange { what: "c1", .. })
        ));
        assert!(mix_scores(0.2, 0.5, -0.1).is_err());
    }

    #[test]
    fn spec_validation_and_name() {
        assert!(matches!(MixtureSpec::new("a", "a", 0.3), Err(CompositionError::SameSource(_))));
        assert!(MixtureSpec::new("a", "b", 1.3).is_err());
        let s = MixtureSpec::new("linguistic", "surrogate", 0.4).unwrap();
        assert_eq!(s.column_name(), "mixture:linguistic+surrogate@a=0.4");
        assert_eq!(
            MixtureSpec::new("l", "s", TIEBREAK_ALPHA).unwrap().column_name(),
            "mixture:l+s@a=0.001"
        );
    }

    #[test]
    fn compose_endpoints_bit_exact() {
        let s = set(&[("a", true, 0.9, 0.31), ("b", false, 0.9, 0.77), ("c", true, 0.1, 0.5)]);
        let zero = compose_column(&s, &MixtureSpec::new("ling", "sur", 0.0).unwrap(), Some("m")).unwrap();
        let one = compose_column(&s, &MixtureSpec::new("ling", "sur", 1.0).unwrap(), Some("m")).unwrap();
        for ((z, o), r) in zero.records().iter().zip(one.records()).zip(s.records()) {
            assert_eq!(z.confidences["m"].to_bits(), r.confidences["ling"].to_bits());
            assert_eq!(o.confidences["m"].to_bits(), r.confidences["sur"].to_bits());
            assert_eq!(z.confidences["ling"].to_bits(), r.confidences["ling"].to_bits());
        }
    }

    #[test]
    fn compose_reports_missing_examples() {
        let recs = vec![
            PredictionRecord::new("a", "d", true).with_confidence("ling", 0.5).with_confidence("sur", 0.5),
            PredictionRecord::new("b", "d", true).with_confidence("ling", 0.5),
        ];
        let s = RecordSet::new(recs).unwrap();
        let err = compose_column(&s, &MixtureSpec::new("ling", "sur", 0.5).unwrap(), None).unwrap_err();
        assert!(err.to_string().contains('b'), "{err}");
    }

    #[test]
    fn compose_skips_failure_records() {
        let mut bad = PredictionRecord::new("f", "d", false);
        bad.failure = Some("LABEL_MISSING".into());
        let recs = vec![
            PredictionRecord::new("a", "d", true).with_confidence("ling", 0.5).with_confidence("sur", 0.2),
            bad.clone(),
        ];
        let out = tiebreak_column(&RecordSet::new(recs).unwrap(), "ling", "sur", Some("t")).unwrap();
        assert_eq!(out.records()[1], bad);
        assert!(out.records()[0].confidences.contains_key("t"));
    }

    #[test]
    fn tiebreak_orders_within_ties() {
        let s = set(&[("a", true, 0.9, 0.3), ("b", true, 0.9, 0.8), ("c", true, 0.5, 1.0)]);
        let t = tiebreak_column(&s, "ling", "sur", Some("t")).unwrap();
        let score = |i: usize| t.records()[i].confidences["t"];
        assert!(score(1) > score(0));
        assert!(score(0) > score(2));
    }

    #[test]
    fn tiebreak_with_constant_aux_keeps_ties() {
        let s = set(&[("a", true, 0.9, 0.4), ("b", false, 0.9, 0.4), ("c", true, 0.7, 0.4)]);
        let t = tiebreak_column(&s, "ling", "sur", Some("t")).unwrap();
        let sc: Vec<f64> = t.records().iter().map(|r| r.confidences["t"]).collect();
        assert_eq!(sc[0], sc[1]);
        assert!(sc[0] > sc[2]);
    }

    #[test]
    fn default_grid_shape() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 22);
        assert_eq!(&g[..3], &[0.0, 0.001, 0.05]);
        assert_eq!(g[9], 0.4);
        assert_eq!(g[13], 0.6);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sweep_duplicate_source_is_flat() {
        let rows: Vec<(String, bool, f64)> =
            (0..12).map(|i| (format!("e{i}"), i % 3 != 0, (i % 4) as f64 / 4.0)).collect();
        let recs = rows
            .iter()
            .map(|(id, c, s)| {
                PredictionRecord::new(id.clone(), "d", *c)
                    .with_confidence("ling", *s)
                    .with_confidence("copy", *s)
            })
            .collect();
        let s = RecordSet::new(recs).unwrap();
        let grid = [0.7, 0.2, 0.5];
        let r = sweep_alpha(&s, "ling", "copy", &grid).unwrap();
        assert!(r.grid.iter().all(|p| p.1 == r.grid[0].1));
        assert_eq!(r.best_alpha, 0.2);
        assert_eq!(r.grid.iter().map(|p| p.0).collect::<Vec<_>>(), grid);
    }

    #[test]
    fn sweep_errors() {
        let s = set(&[("a", true, 0.9, 0.3)]);
        assert!(matches!(sweep_alpha(&s, "ling", "sur", &[]), Err(CompositionError::EmptyGrid)));
        assert!(sweep_alpha(&s, "ling", "sur", &[1.5]).is_err());
        assert!(sweep_alpha(&s, "ling", "nope", &[0.5]).is_err());
    }

    #[test]
    fn sweep_csv() {
        let s = set(&[("a", true, 0.9, 0.3), ("b", false, 0.2, 0.8)]);
        let r = sweep_alpha(&s, "ling", "sur", &[0.0, 0.5, 1.0]).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv, "alpha,auc\n0,0.75\n0.5,0.75\n1,0.25\n");
        assert_eq!(r.best_alpha, 0.0);
    }

    #[test]
    fn holdout_split() {
        let rows: Vec<(String, bool, f64, f64)> = (0..40)
            .map(|i| (format!("e{i:02}"), i % 2 == 0, 0.5, if i % 2 == 0 { 0.9 } else { 0.1 }))
            .collect();
        let recs = rows
            .iter()
            .map(|(id, c, m, a)| {
                PredictionRecord::new(id.clone(), "d", *c)
                    .with_confidence("ling", *m)
                    .with_confidence("sur", *a)
            })
            .collect();
        let s = RecordSet::new(recs).unwrap();
        let h = sweep_alpha_holdout(&s, "ling", "sur", &default_alpha_grid(), 0.25, 3).unwrap();
        assert_eq!(h.heldout_examples, 10);
        assert_eq!(h.selection.best_alpha, TIEBREAK_ALPHA);
        // The surrogate separates perfectly, so the held-out AUC is the
        // perfect-ordering value for however many correct examples landed there.
        let perfect = |a: usize| (a as f64 + (a + 1..=10).map(|k| a as f64 / k as f64).sum::<f64>()) / 10.0;
        assert!((0..=10).any(|a| (perfect(a) - h.heldout_auc).abs() < 1e-12), "{}", h.heldout_auc);
        assert!(sweep_alpha_holdout(&s, "ling", "sur", &[0.5], 0.0, 3).is_err());
        assert!(sweep_alpha_holdout(&s, "ling", "sur", &[0.5], 1.0, 3).is_err());
    }

    #[test]
    fn self_consistency() {
        let b = Label(1);
        assert_eq!(aggregate_self_consistency(&[(b, 0.9); 5]).unwrap(), (b, 0.9));
        let (l, m) = aggregate_self_consistency(&[(Label(0), 0.8), (Label(0), 0.6), (b, 0.9)]).unwrap();
        assert_eq!(l, Label(0));
        assert_abs_diff_eq!(m, 0.7, epsilon = 1e-12);
        // Vote tie, equal means: lower label wins regardless of input order.
        assert_eq!(
            aggregate_self_consistency(&[(Label(3), 0.5), (Label(2), 0.5)]).unwrap(),
            (Label(2), 0.5)
        );
        // Vote tie, higher mean wins.
        assert_eq!(
            aggregate_self_consistency(&[(Label(0), 0.4), (Label(2), 0.6)]).unwrap(),
            (Label(2), 0.6)
        );
        assert!(matches!(aggregate_self_consistency(&[]), Err(CompositionError::EmptySamples)));
        assert!(aggregate_self_consistency(&[(b, 1.5)]).is_err());
    }
}
