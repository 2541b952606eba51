use std::collections::HashMap;

use crate::error::{invalid, Result};

/// Highest n-gram order used by [`bleu`].
pub const BLEU_ORDER: usize = 4;

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over token ids, in percent.
///
/// Clipped n-gram precisions are pooled over the corpus. An order with
/// hypothesis n-grams but no matches uses `1/(t+1)` instead of zero. An order
/// with no hypothesis n-grams at all gives a score of 0.
pub fn bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        ));
    }
    if hypotheses.is_empty() {
        return invalid("empty corpus");
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if totals.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..BLEU_ORDER)
        .map(|i| {
            let p = if matches[i] == 0 {
                1.0 / (totals[i] + 1) as f64
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Fraction of hypotheses identical to their reference.
pub fn sequence_accuracy(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return invalid("sequence accuracy needs equal, non-empty lists");
    }
    let hits = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent pooled n-gram counter: quadratic scan, no hashing.
    fn oracle(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
        let mut logs = 0.0;
        for n in 1..=4 {
            let (mut m, mut t) = (0usize, 0usize);
            for (h, r) in hyps.iter().zip(refs) {
                if h.len() < n {
                    continue;
                }
                let hg: Vec<&[u32]> = h.windows(n).collect();
                let rg: Vec<&[u32]> = if r.len() >= n {
                    r.windows(n).collect()
                } else {
                    vec![]
                };
                let mut used = vec![false; rg.len()];
                for g in &hg {
                    t += 1;
                    if let Some(j) = (0..rg.len()).find(|&j| !used[j] && rg[j] == *g) {
                        used[j] = true;
                        m += 1;
                    }
                }
            }
            if t == 0 {
                return 0.0;
            }
            let p = if m == 0 {
                1.0 / (t as f64 + 1.0)
            } else {
                m as f64 / t as f64
            };
            logs += p.ln() / 4.0;
        }
        let c: usize = hyps.iter().map(Vec::len).sum();
        let r: usize = refs.iter().map(Vec::len).sum();
        let bp = if c > r {
            1.0
        } else {
            (1.0 - r as f64 / c as f64).exp()
        };
        100.0 * bp * logs.exp()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let x = vec![vec![3, 4, 5, 6, 7], vec![9, 9, 10, 11]];
        assert!((bleu(&x, &x).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let h = vec![vec![], vec![]];
        let r = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        assert_eq!(bleu(&h, &r).unwrap(), 0.0);
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn smoothed_fourth_order() {
        let h = vec![vec![1, 2, 3, 4]];
        let r = vec![vec![1, 2, 3, 5]];
        let hand = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        let got = bleu(&h, &r).unwrap();
        assert!((got - hand).abs() < 1e-9, "{got} vs {hand}");
        assert!((got - oracle(&h, &r)).abs() < 1e-9);
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        let h = vec![vec![1, 2], vec![3], vec![4, 5]];
        let r = vec![vec![1, 2], vec![3, 3], vec![4, 5]];
        assert!((sequence_accuracy(&h, &r).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<u32>, Vec<u32>)>> {
        prop::collection::vec(
            (
                prop::collection::vec(0u32..6, 0..10),
                prop::collection::vec(0u32..6, 1..10),
            ),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn matches_oracle(pairs in corpus()) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let a = bleu(&h, &r).unwrap();
            let b = oracle(&h, &r);
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn self_bleu_is_100(x in prop::collection::vec(prop::collection::vec(0u32..50, 4..12), 1..5)) {
            prop_assert!((bleu(&x, &x).unwrap() - 100.0).abs() < 1e-9);
        }
    }
}
