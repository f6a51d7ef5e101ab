//! ROUGE-1/2/L scoring with clipped n-gram counts.
//!
//! Scores are computed on this crate's own tokenization (lowercased, no
//! stemming or stopword removal), so absolute numbers are internally
//! consistent but will not match the official Perl implementation.

use std::collections::HashMap;
use std::hash::Hash;

/// Precision / recall / F1 triple, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_counts(overlap: usize, cand_total: usize, ref_total: usize) -> RougeScore {
        if cand_total == 0 || ref_total == 0 {
            return RougeScore::ZERO;
        }
        let precision = overlap as f64 / cand_total as f64;
        let recall = overlap as f64 / ref_total as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for win in tokens.windows(n) {
            *counts.entry(win.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped counts: each candidate n-gram is credited at most as
/// many times as it appears in the reference. Sequences shorter than `n`
/// score zero.
pub fn rouge_n<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "rouge_n requires n >= 1");
    if candidate.len() < n || reference.len() < n {
        return RougeScore::ZERO;
    }
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total = candidate.len() - n + 1;
    let ref_total = reference.len() - n + 1;
    RougeScore::from_counts(overlap, cand_total, ref_total)
}

/// Length of the longest common subsequence.
fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // Two-row dynamic program.
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: precision and recall of the longest common subsequence against
/// the candidate and reference lengths. Empty sequences score zero.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    let l = lcs_len(candidate, reference);
    RougeScore::from_counts(l, candidate.len(), reference.len())
}
