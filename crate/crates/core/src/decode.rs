//! Autoregressive decoding: greedy and beam search.
//!
//! Beam search ranks finalized hypotheses by `log p(Y) / lp(|Y|)` with the
//! GNMT length penalty `lp(T) = ((5+T)/6)^alpha`, where `T` counts generated
//! tokens (excluding the start and end markers). Repeated n-gram blocking
//! assigns -inf to any token that would complete an n-gram already present
//! in the hypothesis. Hypotheses that reach the end marker consume beam
//! slots in the step they finalize, which makes `beam = 1` coincide exactly
//! with greedy decoding.

use crate::error::{CoreError, Result};

/// Decoding controls shared by greedy and beam search.
#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    /// Number of hypotheses kept per step; 1 reduces to greedy.
    pub beam: usize,
    /// Length-penalty exponent; 0 ranks by raw log-probability.
    pub alpha: f64,
    /// Size of n-grams that may not repeat; 0 disables blocking.
    pub block_ngram: usize,
    /// Maximum generated tokens before forced finalization.
    pub max_len: usize,
    /// Minimum generated tokens before the end marker is allowed.
    pub min_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 4,
            alpha: 0.8,
            block_ngram: 3,
            max_len: 32,
            min_len: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(CoreError::Config("beam size must be at least 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(CoreError::BadLengthBounds {
                min: self.min_len,
                max: self.max_len,
            });
        }
        Ok(())
    }
}

/// Anything that can score the next token given the decoded prefix.
/// The prefix starts with the start-of-sequence id; implementations may
/// cache the encoded input internally.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the next token, length `vocab_size()`.
    fn step_log_probs(&self, prefix: &[u32]) -> Vec<f64>;
}

/// GNMT length penalty.
pub fn length_penalty(generated_len: usize, alpha: f64) -> f64 {
    ((5.0 + generated_len as f64) / 6.0).powf(alpha)
}

/// Next tokens that would complete an `n`-gram already present in `prefix`.
/// `n = 0` forbids nothing.
pub fn block_repeated_ngrams(prefix: &[u32], n: usize) -> Vec<u32> {
    if n == 0 || prefix.len() < n {
        return Vec::new();
    }
    let tail = &prefix[prefix.len() - (n - 1)..];
    let mut banned = Vec::new();
    for win in prefix.windows(n) {
        if &win[..n - 1] == tail {
            let tok = win[n - 1];
            if !banned.contains(&tok) {
                banned.push(tok);
            }
        }
    }
    banned
}

#[derive(Clone)]
struct Hypothesis {
    /// Decoder input so far; starts with BOS, never contains EOS.
    prefix: Vec<u32>,
    /// Sum of step log-probabilities, including the EOS step once finalized.
    log_prob: f64,
}

impl Hypothesis {
    fn generated(&self, bos_len: usize) -> &[u32] {
        &self.prefix[bos_len..]
    }
}

fn penalized(log_prob: f64, generated_len: usize, alpha: f64) -> f64 {
    log_prob / length_penalty(generated_len, alpha)
}

/// Greedy decoding: argmax at each step, honoring min/max length and n-gram
/// blocking. Returns generated ids without the start or end markers.
pub fn greedy_decode<M: StepScorer>(
    scorer: &M,
    bos: u32,
    eos: u32,
    cfg: &DecodeConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut prefix = vec![bos];
    for step in 0..cfg.max_len {
        let mut lp = scorer.step_log_probs(&prefix);
        apply_constraints(&mut lp, &prefix, eos, step, cfg);
        let Some(best) = argmax_finite(&lp) else {
            break; // every token forbidden: finalize as-is
        };
        if best as u32 == eos {
            break;
        }
        prefix.push(best as u32);
    }
    Ok(prefix[1..].to_vec())
}

/// Beam search. Returns the generated ids (no start/end markers) of the
/// hypothesis with the best length-penalized score; ties keep the hypothesis
/// finalized earlier.
pub fn beam_search<M: StepScorer>(
    scorer: &M,
    bos: u32,
    eos: u32,
    cfg: &DecodeConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut live = vec![Hypothesis {
        prefix: vec![bos],
        log_prob: 0.0,
    }];
    let mut finalized: Vec<(f64, Vec<u32>)> = Vec::new();

    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        // Score all continuations of all live hypotheses.
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let mut lp = scorer.step_log_probs(&hyp.prefix);
            apply_constraints(&mut lp, &hyp.prefix, eos, step, cfg);
            if lp.iter().all(|v| !v.is_finite()) {
                // Nothing is allowed: treat as if EOS had probability 1.
                finalized.push((
                    penalized(hyp.log_prob, hyp.prefix.len() - 1, cfg.alpha),
                    hyp.generated(1).to_vec(),
                ));
                continue;
            }
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    candidates.push((hyp.log_prob + l, hi, tok as u32));
                }
            }
        }
        // Keep the top `beam` overall; EOS picks consume their slot.
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        candidates.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cfg.beam);
        for (score, hi, tok) in candidates {
            let hyp = &live[hi];
            if tok == eos {
                let gen_len = hyp.prefix.len() - 1;
                finalized.push((
                    penalized(score, gen_len, cfg.alpha),
                    hyp.generated(1).to_vec(),
                ));
            } else {
                let mut prefix = hyp.prefix.clone();
                prefix.push(tok);
                next.push(Hypothesis {
                    prefix,
                    log_prob: score,
                });
            }
        }
        live = next;
    }
    // Whatever is still live at max length finalizes without an EOS step.
    for hyp in live {
        finalized.push((
            penalized(hyp.log_prob, hyp.prefix.len() - 1, cfg.alpha),
            hyp.generated(1).to_vec(),
        ));
    }
    // Strictly-greater comparison keeps the earliest on ties.
    let mut best: Option<(f64, Vec<u32>)> = None;
    for (score, ids) in finalized {
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, ids));
        }
    }
    Ok(best.expect("beam search produced no hypotheses").1)
}

/// Blocking plus length constraints, applied in place as -inf entries.
fn apply_constraints(lp: &mut [f64], prefix: &[u32], eos: u32, step: usize, cfg: &DecodeConfig) {
    for tok in block_repeated_ngrams(prefix, cfg.block_ngram) {
        lp[tok as usize] = f64::NEG_INFINITY;
    }
    if step < cfg.min_len {
        lp[eos as usize] = f64::NEG_INFINITY;
    }
}

fn argmax_finite(lp: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in lp.iter().enumerate() {
        if v.is_finite() && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    const BOS: u32 = 1;
    const EOS: u32 = 2;

    /// Scorer backed by an explicit prefix -> distribution table, with a
    /// uniform fallback so unknown prefixes still decode.
    struct TableScorer {
        vocab: usize,
        table: HashMap<Vec<u32>, Vec<f64>>,
    }

    impl TableScorer {
        fn new(vocab: usize, rows: Vec<(Vec<u32>, Vec<f64>)>) -> Self {
            let table = rows
                .into_iter()
                .map(|(k, probs)| {
                    assert_eq!(probs.len(), vocab);
                    let s: f64 = probs.iter().sum();
                    assert!((s - 1.0).abs() < 1e-9, "distribution must sum to 1");
                    (k, probs.iter().map(|p| p.max(1e-300).ln()).collect())
                })
                .collect();
            TableScorer { vocab, table }
        }
    }

    impl StepScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn step_log_probs(&self, prefix: &[u32]) -> Vec<f64> {
            self.table.get(prefix).cloned().unwrap_or_else(|| {
                vec![(1.0 / self.vocab as f64).ln(); self.vocab]
            })
        }
    }

    /// Tokens 3 and 4 are ordinary symbols; the table is chosen so the
    /// greedy path (take 3 first) is globally worse than starting with 4.
    fn trap_scorer() -> TableScorer {
        let eps = 1e-12;
        TableScorer::new(
            5,
            vec![
                // p(3)=0.6 tempts greedy; p(4)=0.4 leads to the good tail.
                (vec![BOS], vec![eps, eps, eps, 0.6, 0.4 - 3.0 * eps]),
                // After 3, mass is spread: best continuation only 0.5.
                (vec![BOS, 3], vec![eps, eps, 0.1, 0.5 - 2.0 * eps, 0.4]),
                (vec![BOS, 3, 3], vec![eps, eps, 0.9 - 3.0 * eps, 0.05, 0.05]),
                (vec![BOS, 3, 4], vec![eps, eps, 0.9 - 3.0 * eps, 0.05, 0.05]),
                // After 4, the model is confident: 0.9 then EOS 0.95.
                (vec![BOS, 4], vec![eps, eps, 0.02, 0.08 - 3.0 * eps, 0.9]),
                (vec![BOS, 4, 4], vec![eps, eps, 0.95, 0.05 - 3.0 * eps, eps]),
            ],
        )
    }

    fn cfg(beam: usize) -> DecodeConfig {
        DecodeConfig {
            beam,
            alpha: 0.0,
            block_ngram: 0,
            max_len: 2,
            min_len: 0,
        }
    }

    /// Exhaustive enumeration of every sequence up to max_len, the oracle
    /// the beam result is checked against.
    fn best_by_enumeration(scorer: &TableScorer, cfg: &DecodeConfig) -> (f64, Vec<u32>) {
        fn recurse(
            scorer: &TableScorer,
            cfg: &DecodeConfig,
            prefix: &mut Vec<u32>,
            log_prob: f64,
            out: &mut Vec<(f64, Vec<u32>)>,
        ) {
            let gen_len = prefix.len() - 1;
            if gen_len == cfg.max_len {
                out.push((penalized(log_prob, gen_len, cfg.alpha), prefix[1..].to_vec()));
                return;
            }
            let lp = scorer.step_log_probs(prefix);
            for tok in 0..scorer.vocab_size() as u32 {
                if tok == EOS {
                    if gen_len >= cfg.min_len {
                        out.push((
                            penalized(log_prob + lp[tok as usize], gen_len, cfg.alpha),
                            prefix[1..].to_vec(),
                        ));
                    }
                    continue;
                }
                prefix.push(tok);
                recurse(scorer, cfg, prefix, log_prob + lp[tok as usize], out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        recurse(scorer, cfg, &mut vec![BOS], 0.0, &mut out);
        out.into_iter()
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .unwrap()
    }

    #[test]
    fn beam_two_recovers_sequence_greedy_misses() {
        let scorer = trap_scorer();
        let c = cfg(2);
        let greedy = greedy_decode(&scorer, BOS, EOS, &c).unwrap();
        assert_eq!(greedy, vec![3, 3], "greedy should fall into the trap");
        let beam = beam_search(&scorer, BOS, EOS, &c).unwrap();
        let (_, oracle) = best_by_enumeration(&scorer, &c);
        assert_eq!(beam, oracle);
        assert_eq!(beam, vec![4, 4], "beam=2 should find the confident tail");
    }

    #[test]
    fn beam_one_is_exactly_greedy() {
        let scorer = trap_scorer();
        for block in [0, 3] {
            for max_len in [1, 2, 4, 8] {
                let c = DecodeConfig {
                    beam: 1,
                    alpha: 0.7,
                    block_ngram: block,
                    max_len,
                    min_len: 1,
                };
                assert_eq!(
                    beam_search(&scorer, BOS, EOS, &c).unwrap(),
                    greedy_decode(&scorer, BOS, EOS, &c).unwrap()
                );
            }
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        let scorer = trap_scorer();
        for beam in [1, 2, 3, 5] {
            let c = DecodeConfig { beam, ..cfg(2) };
            let score_of = |ids: &[u32]| {
                // Re-score a generated sequence under the model.
                let mut prefix = vec![BOS];
                let mut lp = 0.0;
                for &t in ids {
                    lp += scorer.step_log_probs(&prefix)[t as usize];
                    prefix.push(t);
                }
                if ids.len() < c.max_len {
                    lp += scorer.step_log_probs(&prefix)[EOS as usize];
                }
                penalized(lp, ids.len(), c.alpha)
            };
            let g = greedy_decode(&scorer, BOS, EOS, &c).unwrap();
            let b = beam_search(&scorer, BOS, EOS, &c).unwrap();
            assert!(score_of(&b) >= score_of(&g) - 1e-12);
        }
    }

    #[test]
    fn alpha_zero_ranks_by_raw_log_probability() {
        assert_eq!(length_penalty(7, 0.0), 1.0);
        assert_eq!(length_penalty(0, 0.0), 1.0);
    }

    #[test]
    fn length_penalty_matches_formula() {
        let alpha = 0.8;
        for t in [0usize, 1, 5, 20] {
            let expected = ((5.0 + t as f64) / 6.0).powf(alpha);
            assert!((length_penalty(t, alpha) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn blocking_hand_case() {
        // prefix a,b,c,a,b with n=3: continuing with c would repeat a-b-c.
        let banned = block_repeated_ngrams(&[10, 11, 12, 10, 11], 3);
        assert_eq!(banned, vec![12]);
        assert!(block_repeated_ngrams(&[10, 11, 12, 10, 11], 0).is_empty());
        assert!(block_repeated_ngrams(&[10], 3).is_empty());
    }

    #[test]
    fn min_length_forbids_early_eos() {
        // A scorer that wants to emit EOS immediately.
        let scorer = TableScorer::new(
            4,
            vec![(vec![BOS], vec![1e-12, 1e-12, 1.0 - 0.1 - 3e-12, 0.1])],
        );
        let c = DecodeConfig {
            beam: 2,
            alpha: 0.0,
            block_ngram: 0,
            max_len: 3,
            min_len: 2,
        };
        let out = beam_search(&scorer, BOS, EOS, &c).unwrap();
        assert!(out.len() >= 2, "min_len must hold, got {:?}", out);
        let g = greedy_decode(&scorer, BOS, EOS, &c).unwrap();
        assert!(g.len() >= 2);
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        let c = DecodeConfig {
            min_len: 5,
            max_len: 3,
            ..cfg(2)
        };
        let scorer = trap_scorer();
        assert!(matches!(
            beam_search(&scorer, BOS, EOS, &c),
            Err(crate::CoreError::BadLengthBounds { min: 5, max: 3 })
        ));
        let zero_beam = DecodeConfig { beam: 0, ..cfg(2) };
        assert!(beam_search(&scorer, BOS, EOS, &zero_beam).is_err());
    }

    #[test]
    fn no_repeated_trigrams_over_random_scorers() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(97);
        for _ in 0..100 {
            // Random but prefix-independent-ish scorer: log-probs derived
            // from a per-trial seed and the prefix tail, heavy on few tokens
            // so repeats are likely without blocking.
            let bias: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..4.0)).collect();
            struct Biased {
                bias: Vec<f64>,
            }
            impl StepScorer for Biased {
                fn vocab_size(&self) -> usize {
                    self.bias.len()
                }
                fn step_log_probs(&self, prefix: &[u32]) -> Vec<f64> {
                    let shift = (prefix.len() % 3) as f64 * 0.1;
                    let mut lp: Vec<f64> =
                        self.bias.iter().map(|b| b + shift).collect();
                    lp[0] = f64::NEG_INFINITY; // never pad
                    let mx = lp.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = lp.iter().map(|v| (v - mx).exp()).sum();
                    lp.iter().map(|v| v - mx - z.ln()).collect()
                }
            }
            let scorer = Biased { bias };
            let c = DecodeConfig {
                beam: 3,
                alpha: 0.8,
                block_ngram: 3,
                max_len: 24,
                min_len: 1,
            };
            let out = beam_search(&scorer, BOS, EOS, &c).unwrap();
            let mut seen = std::collections::HashSet::new();
            for w in out.windows(3) {
                assert!(seen.insert(w.to_vec()), "repeated trigram in {:?}", out);
            }
        }
    }
}
