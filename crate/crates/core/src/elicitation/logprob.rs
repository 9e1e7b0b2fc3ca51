//! Probability of the chosen answer letter from per-token log-probabilities.

use super::FailureCode;
use crate::records::Label;

fn strip(token: &str) -> &str {
    token.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
}

/// `exp(logprob)` of the first token that, stripped of surrounding whitespace
/// and punctuation, spells the answer letter. An exact-case match anywhere
/// wins over an earlier case-insensitive one, which keeps a leading "a" from
/// standing in for choice A. The result is clamped into `(0, 1]`.
pub fn answer_probability(tokens: &[(String, f64)], label: Label) -> Result<f64, FailureCode> {
    let letter = label.letter().ok_or(FailureCode::LogprobMissing)?;
    let mut buf = [0u8; 4];
    let want: &str = letter.encode_utf8(&mut buf);
    let usable = |lp: &f64| !lp.is_nan();
    let hit = tokens
        .iter()
        .find(|(t, lp)| usable(lp) && strip(t) == want)
        .or_else(|| {
            tokens
                .iter()
                .find(|(t, lp)| usable(lp) && strip(t).eq_ignore_ascii_case(want))
        });
    match hit {
        Some((_, lp)) => Ok(lp.exp().clamp(f64::MIN_POSITIVE, 1.0)),
        None => Err(FailureCode::LogprobMissing),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(t, l)| (t.to_string(), *l)).collect()
    }

    fn b() -> Label {
        Label::from_letter('B').unwrap()
    }

    #[test]
    fn direct_exponentiation() {
        let p = answer_probability(&toks(&[("B", 0.73f64.ln())]), b()).unwrap();
        assert!((p - 0.73).abs() < 1e-15);
        assert_eq!(answer_probability(&toks(&[("B", 0.0)]), b()), Ok(1.0));
    }

    #[test]
    fn normalization() {
        let p = answer_probability(&toks(&[(" b", 0.5f64.ln())]), b()).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        for t in [" B", "B.", "(B)", "\nB:", "**B**"] {
            assert!(answer_probability(&toks(&[(t, -1.0)]), b()).is_ok(), "{t:?}");
        }
        assert_eq!(answer_probability(&toks(&[("Bee", -1.0)]), b()), Err(FailureCode::LogprobMissing));
    }

    #[test]
    fn first_match_and_case_preference() {
        let t = toks(&[("Answer", -0.1), (":", -0.1), (" B", -0.2), ("B", -3.0)]);
        assert!((answer_probability(&t, b()).unwrap() - (-0.2f64).exp()).abs() < 1e-15);
        let a = Label::from_letter('A').unwrap();
        let t = toks(&[(" a", -5.0), (" A", -0.5)]);
        assert!((answer_probability(&t, a).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn stays_in_unit_interval() {
        assert_eq!(answer_probability(&toks(&[("B", f64::NEG_INFINITY)]), b()), Ok(f64::MIN_POSITIVE));
        assert_eq!(answer_probability(&toks(&[("B", 0.3)]), b()), Ok(1.0));
        assert_eq!(answer_probability(&toks(&[("B", f64::NAN)]), b()), Err(FailureCode::LogprobMissing));
        assert_eq!(answer_probability(&[], b()), Err(FailureCode::LogprobMissing));
    }
}
