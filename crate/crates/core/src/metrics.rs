//! Selective-classification metrics.
//!
//! All metrics consume `(score, correct)` pairs. Selection is by descending
//! score. When several outcomes share a score, the randomized metrics take
//! the exact expectation over a uniformly random order within the tie, which
//! is what infinitesimal Gaussian noise on the scores produces in the limit.
//!
//! - [`auc_randomized`]: mean selective accuracy over coverages `k/n`.
//! - [`auc_deterministic`]: same, but thresholding keeps whole tie groups.
//! - [`auroc`]: Mann-Whitney rank statistic, tied pairs count 1/2.
//! - [`ece_dynamic`]: equal-mass binned calibration error.
//! - [`auc_monte_carlo`]: sampling estimate of the randomized AUC, kept as an
//!   independent check on the exact computation.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no outcomes")]
    Empty,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("count k={k} outside [1, {n}]")]
    CountOutOfRange { k: usize, n: usize },
    #[error("coverage {0} outside (0, 1]")]
    CoverageOutOfRange(f64),
    #[error("AUROC undefined: {correct} correct and {incorrect} incorrect outcomes")]
    AurocUndefined { correct: usize, incorrect: usize },
    #[error("{n} outcomes cannot fill {bins} bins")]
    TooFewForBins { n: usize, bins: usize },
    #[error("bin count must be positive")]
    ZeroBins,
    #[error("trial count must be positive")]
    ZeroTrials,
}

/// A confidence score paired with whether the answer was right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredOutcome {
    pub score: f64,
    pub correct: bool,
}

impl ScoredOutcome {
    pub fn new(score: f64, correct: bool) -> Self {
        Self { score, correct }
    }
}

/// `(coverage, expected selective accuracy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub coverage: f64,
    pub selective_accuracy: f64,
}

/// Every metric for one confidence column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub auc_randomized: f64,
    pub auc_deterministic: f64,
    /// `None` when every outcome is correct or every outcome is incorrect.
    pub auroc: Option<f64>,
    /// `None` when there are fewer outcomes than bins.
    pub ece: Option<f64>,
    pub bins: usize,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

/// Outcomes sharing one score.
#[derive(Debug, Clone, Copy)]
struct TieGroup {
    size: u64,
    correct: u64,
}

fn validate(outcomes: &[ScoredOutcome]) -> Result<(), MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    match outcomes.iter().find(|o| !(0.0..=1.0).contains(&o.score)) {
        Some(o) => Err(MetricError::ScoreOutOfRange(o.score)),
        None => Ok(()),
    }
}

/// Scores sorted descending, equal scores merged.
fn tie_groups(outcomes: &[ScoredOutcome]) -> Vec<TieGroup> {
    let mut sorted: Vec<ScoredOutcome> = outcomes.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<TieGroup> = Vec::new();
    let mut last: Option<f64> = None;
    for o in sorted {
        if last == Some(o.score) {
            let g = groups.last_mut().expect("group exists once a score was seen");
            g.size += 1;
            g.correct += o.correct as u64;
        } else {
            groups.push(TieGroup {
                size: 1,
                correct: o.correct as u64,
            });
            last = Some(o.score);
        }
    }
    groups
}

fn correct_count(outcomes: &[ScoredOutcome]) -> usize {
    outcomes.iter().filter(|o| o.correct).count()
}

pub fn accuracy(outcomes: &[ScoredOutcome]) -> Result<f64, MetricError> {
    validate(outcomes)?;
    Ok(correct_count(outcomes) as f64 / outcomes.len() as f64)
}

/// Expected number of correct answers among the top `k`, as `correct / k`.
///
/// Whole groups above the boundary count in full; a boundary group of `m`
/// outcomes with `g` correct that supplies `j` slots adds `j * g / m`.
pub fn selective_accuracy_randomized_exact(
    outcomes: &[ScoredOutcome],
    k: usize,
) -> Result<Ratio<u64>, MetricError> {
    validate(outcomes)?;
    let n = outcomes.len();
    if k == 0 || k > n {
        return Err(MetricError::CountOutOfRange { k, n });
    }
    let k = k as u64;
    let mut taken = 0u64;
    let mut full_correct = 0u64;
    for g in tie_groups(outcomes) {
        if taken + g.size <= k {
            taken += g.size;
            full_correct += g.correct;
            if taken == k {
                break;
            }
        } else {
            let slots = k - taken;
            return Ok(Ratio::new(full_correct * g.size + slots * g.correct, g.size * k));
        }
    }
    Ok(Ratio::new(full_correct, k))
}

pub fn selective_accuracy_randomized(outcomes: &[ScoredOutcome], k: usize) -> Result<f64, MetricError> {
    let r = selective_accuracy_randomized_exact(outcomes, k)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

/// Result of thresholding at the highest score that reaches the requested coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeterministicSelection {
    pub selected: usize,
    pub correct: usize,
    pub n: usize,
}

impl DeterministicSelection {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.selected as f64
    }

    pub fn achieved_coverage(&self) -> f64 {
        self.selected as f64 / self.n as f64
    }

    pub fn accuracy_exact(&self) -> Ratio<u64> {
        Ratio::new(self.correct as u64, self.selected as u64)
    }
}

/// Picks the highest threshold `t` with `P(score >= t) >= coverage` and
/// predicts on every outcome at or above it.
///
/// Coverage is converted to a count as `ceil(coverage * n)`, with a 1e-9
/// allowance so `0.3 * 10` still means 3.
pub fn selective_accuracy_deterministic(
    outcomes: &[ScoredOutcome],
    coverage: f64,
) -> Result<DeterministicSelection, MetricError> {
    validate(outcomes)?;
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(MetricError::CoverageOutOfRange(coverage));
    }
    let n = outcomes.len();
    let needed = ((coverage * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n);
    let mut selected = 0;
    let mut correct = 0;
    for g in tie_groups(outcomes) {
        selected += g.size as usize;
        correct += g.correct as usize;
        if selected >= needed {
            break;
        }
    }
    Ok(DeterministicSelection {
        selected,
        correct,
        n,
    })
}

/// Sum over `k = 1..=n` of the randomized selective accuracy at `k`.
///
/// A singleton group at position `k` contributes `C_k / k`. A tie group of
/// `m` outcomes (`g` correct) after `s` earlier outcomes (`F` correct)
/// contributes `sum_{j=1..m} (F + j*g/m) / (s + j)`, evaluated as
/// `g + (F - s*g/m) * H` with `H = sum_{k=s+1..s+m} 1/k`. With a single tie
/// group the correction vanishes and the sum is exactly `g`.
fn selective_accuracy_sum(groups: &[TieGroup]) -> f64 {
    let mut total = 0.0;
    let mut before = 0u64;
    let mut before_correct = 0u64;
    for g in groups {
        if g.size == 1 {
            total += (before_correct + g.correct) as f64 / (before + 1) as f64;
        } else {
            let shift = (before_correct * g.size) as f64 - (before * g.correct) as f64;
            let harmonic: f64 = (before + 1..=before + g.size).map(|k| 1.0 / k as f64).sum();
            total += g.correct as f64 + shift / g.size as f64 * harmonic;
        }
        before += g.size;
        before_correct += g.correct;
    }
    total
}

/// Area under the coverage/selective-accuracy curve with randomized tie-breaking.
///
/// Evaluated as the exact mean of the expected selective accuracy over
/// `k = 1..=n`; the result does not depend on input order.
pub fn auc_randomized(outcomes: &[ScoredOutcome]) -> Result<f64, MetricError> {
    validate(outcomes)?;
    Ok(selective_accuracy_sum(&tie_groups(outcomes)) / outcomes.len() as f64)
}

/// Mean deterministic selective accuracy over coverages `k/n`.
pub fn auc_deterministic(outcomes: &[ScoredOutcome]) -> Result<f64, MetricError> {
    validate(outcomes)?;
    let mut total = 0.0;
    let mut end = 0u64;
    let mut end_correct = 0u64;
    for g in tie_groups(outcomes) {
        end += g.size;
        end_correct += g.correct;
        // Every k inside this group selects through its end.
        total += (g.size * end_correct) as f64 / end as f64;
    }
    Ok(total / outcomes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloAuc {
    pub mean: f64,
    /// Sample standard deviation over trials divided by `sqrt(trials)`.
    pub std_error: f64,
    pub trials: usize,
}

/// Estimates the randomized AUC by perturbing scores with Gaussian noise.
///
/// Noise is added to each outcome's rank among the distinct scores, which
/// is a strictly increasing transform of the score, so the distribution of
/// selection orders is unchanged. The standard deviation is 1e-9 of the
/// unit rank gap (1e-12 when every score ties), far too small to reorder
/// distinct scores. Trial `t` draws from a ChaCha8 stream `t` seeded with
/// `seed`, so results do not depend on thread scheduling.
pub fn auc_monte_carlo(
    outcomes: &[ScoredOutcome],
    trials: usize,
    seed: u64,
) -> Result<MonteCarloAuc, MetricError> {
    validate(outcomes)?;
    if trials == 0 {
        return Err(MetricError::ZeroTrials);
    }
    let mut distinct: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let epsilon = if distinct.len() > 1 { 1e-9 } else { 1e-12 };
    let ranked: Vec<(f64, bool)> = outcomes
        .iter()
        .map(|o| {
            let rank = distinct.partition_point(|&s| s < o.score);
            (rank as f64, o.correct)
        })
        .collect();

    let per_trial: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut noisy: Vec<(f64, bool)> = ranked
                .iter()
                .map(|&(r, c)| {
                    let z: f64 = rng.sample(StandardNormal);
                    (r + epsilon * z, c)
                })
                .collect();
            noisy.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut correct = 0u64;
            let mut sum = 0.0;
            for (k, (_, c)) in noisy.iter().enumerate() {
                correct += *c as u64;
                sum += correct as f64 / (k + 1) as f64;
            }
            sum / noisy.len() as f64
        })
        .collect();

    // Sums of deviations from the first trial stay small, so identical trials
    // give back exactly that value with zero spread.
    let base = per_trial[0];
    let mean_dev = per_trial.iter().map(|x| x - base).sum::<f64>() / trials as f64;
    let mean = base + mean_dev;
    let std_error = if trials > 1 {
        let var = per_trial.iter().map(|x| (x - base - mean_dev).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        0.0
    };
    Ok(MonteCarloAuc {
        mean,
        std_error,
        trials,
    })
}

/// Area under the ROC curve with correctness as the positive class.
///
/// Computed from mid-ranks, kept in integer arithmetic as twice the
/// Mann-Whitney U statistic, so tied correct/incorrect pairs count 1/2.
pub fn auroc(outcomes: &[ScoredOutcome]) -> Result<f64, MetricError> {
    validate(outcomes)?;
    let positives = correct_count(outcomes) as u128;
    let negatives = outcomes.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::AurocUndefined {
            correct: positives as usize,
            incorrect: negatives as usize,
        });
    }
    let mut groups = tie_groups(outcomes);
    groups.reverse();
    // Group covering 1-based ranks start+1..=end has mid-rank (start+1+end)/2.
    let mut start = 0u128;
    let mut twice_rank_sum = 0u128;
    for g in &groups {
        let end = start + g.size as u128;
        twice_rank_sum += g.correct as u128 * (start + 1 + end);
        start = end;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Expected calibration error over equal-mass bins.
///
/// Outcomes are sorted by score and cut at `floor(i * n / bins)`. A cut that
/// would fall inside a run of equal scores moves to the end of that run, so
/// equal scores always share a bin; bins emptied by this are dropped. With
/// distinct scores every bin holds `n / bins` outcomes, give or take one.
pub fn ece_dynamic(outcomes: &[ScoredOutcome], bins: usize) -> Result<f64, MetricError> {
    validate(outcomes)?;
    if bins == 0 {
        return Err(MetricError::ZeroBins);
    }
    let n = outcomes.len();
    if n < bins {
        return Err(MetricError::TooFewForBins { n, bins });
    }
    let mut sorted = outcomes.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut cuts = Vec::with_capacity(bins + 1);
    cuts.push(0);
    for i in 1..bins {
        let mut cut = i * n / bins;
        while cut < n && sorted[cut].score == sorted[cut - 1].score {
            cut += 1;
        }
        if cut > *cuts.last().unwrap() {
            cuts.push(cut);
        }
    }
    if *cuts.last().unwrap() < n {
        cuts.push(n);
    }

    let mut ece = 0.0;
    for w in cuts.windows(2) {
        let bin = &sorted[w[0]..w[1]];
        let size = bin.len() as f64;
        let mean_score = bin.iter().map(|o| o.score).sum::<f64>() / size;
        let mean_correct = bin.iter().filter(|o| o.correct).count() as f64 / size;
        ece += size / n as f64 * (mean_score - mean_correct).abs();
    }
    Ok(ece)
}

/// Count of outcomes selected at `coverage`: `floor(coverage * n + 0.5)` clamped to `[1, n]`.
pub fn coverage_to_count(coverage: f64, n: usize) -> usize {
    ((coverage * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

/// Randomized selective accuracy at each coverage in `grid`.
pub fn coverage_accuracy_curve(
    outcomes: &[ScoredOutcome],
    grid: &[f64],
) -> Result<Vec<CurvePoint>, MetricError> {
    validate(outcomes)?;
    if let Some(&c) = grid.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
        return Err(MetricError::CoverageOutOfRange(c));
    }
    let n = outcomes.len();
    grid.iter()
        .map(|&c| {
            Ok(CurvePoint {
                coverage: c,
                selective_accuracy: selective_accuracy_randomized(outcomes, coverage_to_count(c, n))?,
            })
        })
        .collect()
}

/// The curve at every achievable coverage `k/n`, computed in one pass.
pub fn full_curve(outcomes: &[ScoredOutcome]) -> Result<Vec<CurvePoint>, MetricError> {
    validate(outcomes)?;
    let n = outcomes.len() as u64;
    let mut points = Vec::with_capacity(outcomes.len());
    let mut before = 0u64;
    let mut before_correct = 0u64;
    for g in tie_groups(outcomes) {
        for j in 1..=g.size {
            let k = before + j;
            let numer = before_correct * g.size + j * g.correct;
            points.push(CurvePoint {
                coverage: k as f64 / n as f64,
                selective_accuracy: numer as f64 / (g.size * k) as f64,
            });
        }
        before += g.size;
        before_correct += g.correct;
    }
    Ok(points)
}

/// All metrics for one column; AUROC and ECE are `None` where undefined.
pub fn metric_report(outcomes: &[ScoredOutcome], bins: usize) -> Result<MetricReport, MetricError> {
    validate(outcomes)?;
    let auroc = match auroc(outcomes) {
        Ok(v) => Some(v),
        Err(MetricError::AurocUndefined { .. }) => None,
        Err(e) => return Err(e),
    };
    let ece = match ece_dynamic(outcomes, bins) {
        Ok(v) => Some(v),
        Err(MetricError::TooFewForBins { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        n: outcomes.len(),
        accuracy: accuracy(outcomes)?,
        auc_randomized: auc_randomized(outcomes)?,
        auc_deterministic: auc_deterministic(outcomes)?,
        auroc,
        ece,
        bins,
        curve: full_curve(outcomes)?,
    })
}
