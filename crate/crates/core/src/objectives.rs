//! Corruption planning and the pre-training losses.
//!
//! Phase 1 trains three objectives jointly: masked-token prediction for the
//! generator, replaced-token detection for the encoder, and corrupted-span
//! prediction for the full encoder-decoder. Each example gets two
//! independent corruptions — a token-level mask for MLM/RTD and a
//! span-level corruption for CSP — built deterministically from a per-example
//! random stream so corpus order never changes the plans. Phase 2 swaps all
//! of this for a plain conditional likelihood over (document, summary)
//! pairs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::data::{is_special, sentinel, BOS, EOS, NUM_SENTINELS};
use crate::error::{CoreError, Result};
use crate::model::{decode_teacher_forced, encode, ModelConfig, ModelTensors};
use crate::tensor::{Array, Scalar, Tensor};

/// Target id that `cross_entropy_from_logits` skips; never a real token.
pub const IGNORE: u32 = u32::MAX;

// ── Masked-token plan ────────────────────────────────────────────────

/// Positions chosen for masking, with the tokens they hide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmPlan {
    /// Sorted, unique indices into the token sequence.
    pub positions: Vec<usize>,
    /// Original token at each position, in the same order.
    pub originals: Vec<u32>,
}

/// Uniformly samples `round(rate·N)` maskable positions (minimum one).
/// Special tokens are never candidates; the count is clamped to the number
/// of eligible positions.
pub fn build_mlm_plan(tokens: &[u32], rate: f64, rng: &mut ChaCha8Rng) -> Result<MlmPlan> {
    assert!(!tokens.is_empty(), "cannot mask an empty sequence");
    let eligible: Vec<usize> = (0..tokens.len())
        .filter(|&i| !is_special(tokens[i]))
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::NoMaskableTokens);
    }
    let want = ((tokens.len() as f64 * rate).round() as usize)
        .max(1)
        .min(eligible.len());
    // Partial Fisher-Yates over the eligible list: the first `want`
    // entries are a uniform sample without replacement.
    let mut pool = eligible;
    for i in 0..want {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut positions: Vec<usize> = pool[..want].to_vec();
    positions.sort_unstable();
    let originals = positions.iter().map(|&i| tokens[i]).collect();
    Ok(MlmPlan {
        positions,
        originals,
    })
}

/// Replaces every planned position with `mask_id`, leaving the rest intact.
pub fn apply_mlm_mask(tokens: &[u32], plan: &MlmPlan, mask_id: u32) -> Vec<u32> {
    let mut out = tokens.to_vec();
    for &i in &plan.positions {
        out[i] = mask_id;
    }
    out
}

/// Builds the discriminator input: at each masked position, draw one token
/// from the generator's softmax; everywhere else copy the original.
/// Sampling consumes plain logit values, so no gradient flows back into the
/// generator through the sample.
pub fn sample_discriminator_input<S: Scalar>(
    tokens: &[u32],
    plan: &MlmPlan,
    generator_logits: &Array<S>,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let vocab = generator_logits.cols();
    assert_eq!(generator_logits.rows(), tokens.len(), "logits cover input");
    let mut out = tokens.to_vec();
    for &i in &plan.positions {
        let row = &generator_logits.data()[i * vocab..(i + 1) * vocab];
        out[i] = sample_softmax(row, rng);
    }
    out
}

fn sample_softmax<S: Scalar>(logits: &[S], rng: &mut ChaCha8Rng) -> u32 {
    let mx = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64()));
    let weights: Vec<f64> = logits.iter().map(|&x| (x.to_f64() - mx).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (t, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return t as u32;
        }
    }
    (logits.len() - 1) as u32
}

/// Detection labels: `true` where the discriminator input still carries the
/// original token. A sampled replacement that happens to equal the original
/// counts as original — the label is an indicator on token identity, not on
/// whether a position was touched.
pub fn rtd_labels(tokens: &[u32], corrupted: &[u32]) -> Vec<bool> {
    assert_eq!(tokens.len(), corrupted.len());
    tokens.iter().zip(corrupted).map(|(a, b)| a == b).collect()
}

// ── Span-corruption plan ─────────────────────────────────────────────

/// How span positions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CspMode {
    /// Random spans with Poisson-distributed lengths.
    Span,
    /// Whole sentences, delimited by the ids in `delimiters`; equivalent to
    /// gap-sentence generation.
    Sentence,
}

/// One corrupted span: `len` tokens starting at `start`, replaced in the
/// input by `sentinel`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CspSpan {
    pub start: usize,
    pub len: usize,
    pub sentinel: u32,
}

/// A full span-corruption: the plan, the corrupted input, and the target
/// the decoder must reconstruct (`sentinel_0 span_0 sentinel_1 span_1 … EOS`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CspCorruption {
    pub spans: Vec<CspSpan>,
    pub corrupted: Vec<u32>,
    pub target: Vec<u32>,
}

/// Longest span a single draw may produce.
pub const MAX_SPAN: usize = 8;

/// Builds a span corruption covering `round(rate·N)` tokens. Span lengths
/// are Poisson(`mean_span`) clipped to `[1, MAX_SPAN]`; the final span is
/// capped so the total is exact. Overlapping placements are resampled;
/// spans that end up adjacent merge under a single sentinel. In sentence
/// mode, whole delimiter-terminated sentences are chosen instead until the
/// budget is met (the last sentence may overshoot).
pub fn build_csp_plan(
    tokens: &[u32],
    rate: f64,
    mean_span: f64,
    mode: CspMode,
    delimiters: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<CspCorruption> {
    let n = tokens.len();
    if n < 4 {
        return Err(CoreError::SequenceTooShort {
            op: "span corruption",
            len: n,
            min: 4,
        });
    }
    let budget = ((n as f64 * rate).round() as usize).max(1);
    let covered = match mode {
        CspMode::Span => cover_random_spans(n, budget, mean_span, rng),
        CspMode::Sentence => cover_sentences(tokens, budget, delimiters, rng)?,
    };
    assemble_csp(tokens, &covered)
}

fn cover_random_spans(n: usize, budget: usize, mean_span: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let poisson = Poisson::new(mean_span).expect("mean span must be positive");
    let mut covered = vec![false; n];
    let mut placed = 0;
    while placed < budget {
        let remaining = budget - placed;
        let draw = poisson.sample(rng) as usize;
        let mut len = draw.clamp(1, MAX_SPAN).min(remaining);
        let mut attempts = 0;
        loop {
            let start = rng.gen_range(0..=n - len);
            if covered[start..start + len].iter().all(|&c| !c) {
                for c in &mut covered[start..start + len] {
                    *c = true;
                }
                placed += len;
                break;
            }
            attempts += 1;
            if attempts >= 64 {
                if len > 1 {
                    // The board is crowded; shorter spans still fit.
                    len -= 1;
                    attempts = 0;
                } else {
                    // Place a single token on any free cell.
                    let free: Vec<usize> =
                        (0..n).filter(|&i| !covered[i]).collect();
                    if free.is_empty() {
                        return covered;
                    }
                    covered[free[rng.gen_range(0..free.len())]] = true;
                    placed += 1;
                    break;
                }
            }
        }
    }
    covered
}

fn cover_sentences(
    tokens: &[u32],
    budget: usize,
    delimiters: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    // A sentence runs from the previous delimiter (exclusive) through its
    // own delimiter. A trailing fragment with no delimiter is not eligible.
    let mut sentences: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if delimiters.contains(t) {
            sentences.push((start, i + 1 - start));
            start = i + 1;
        }
    }
    if sentences.is_empty() {
        return Err(CoreError::NoSentenceBoundaries);
    }
    let mut covered = vec![false; tokens.len()];
    let mut placed = 0;
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    for i in 0..order.len() {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    for idx in order {
        if placed >= budget {
            break;
        }
        let (s, len) = sentences[idx];
        for c in &mut covered[s..s + len] {
            *c = true;
        }
        placed += len;
    }
    Ok(covered)
}

/// Turns a coverage mask into spans, the corrupted input, and the target.
/// Maximal covered runs become spans, so adjacent placements merge under
/// one sentinel, numbered left to right.
pub fn assemble_csp(tokens: &[u32], covered: &[bool]) -> Result<CspCorruption> {
    assert_eq!(tokens.len(), covered.len());
    let mut spans = Vec::new();
    let mut corrupted = Vec::new();
    let mut target = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if covered[i] {
            let start = i;
            while i < tokens.len() && covered[i] {
                i += 1;
            }
            let index = spans.len();
            if index >= NUM_SENTINELS {
                return Err(CoreError::Config(format!(
                    "span corruption needs more than {NUM_SENTINELS} sentinels"
                )));
            }
            let id = sentinel(index);
            spans.push(CspSpan {
                start,
                len: i - start,
                sentinel: id,
            });
            corrupted.push(id);
            target.push(id);
            target.extend_from_slice(&tokens[start..i]);
        } else {
            corrupted.push(tokens[i]);
            i += 1;
        }
    }
    target.push(EOS);
    Ok(CspCorruption {
        spans,
        corrupted,
        target,
    })
}

/// The decoder input that teacher-forces a span target: shifted right
/// behind BOS, dropping the final position.
pub fn csp_decoder_input(target: &[u32]) -> Vec<u32> {
    let mut input = Vec::with_capacity(target.len());
    input.push(BOS);
    input.extend_from_slice(&target[..target.len() - 1]);
    input
}

// ── Losses ───────────────────────────────────────────────────────────

/// Mean negative log-likelihood of the hidden originals, over masked
/// positions only.
pub fn mlm_loss<S: Scalar>(generator_logits: &Tensor<S>, plan: &MlmPlan) -> Result<Tensor<S>> {
    if plan.positions.is_empty() {
        return Err(CoreError::EmptySequence { op: "mlm_loss" });
    }
    let n = generator_logits.shape()[0];
    let mut targets = vec![IGNORE; n];
    for (&i, &t) in plan.positions.iter().zip(&plan.originals) {
        targets[i] = t;
    }
    generator_logits.cross_entropy_from_logits(&targets, Some(IGNORE))
}

/// Mean binary cross-entropy of the detection scores over all positions.
pub fn rtd_loss<S: Scalar>(scores: &Tensor<S>, labels: &[bool]) -> Tensor<S> {
    scores.binary_ce_with_logits(labels)
}

/// Mean negative log-likelihood of the span target, every position counted.
pub fn csp_loss<S: Scalar>(decoder_logits: &Tensor<S>, target: &[u32]) -> Result<Tensor<S>> {
    if target.is_empty() {
        return Err(CoreError::EmptySequence { op: "csp_loss" });
    }
    decoder_logits.cross_entropy_from_logits(target, None)
}

/// Relative weights of the three phase-1 losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda1: 1.0,
            lambda2: 30.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if v < 0.0 {
                return Err(CoreError::NegativeLossWeight { name, value: v });
            }
        }
        Ok(())
    }
}

/// Weighted sum of the three loss values, for reporting. The training step
/// back-propagates the terms separately (the generator loss first, then the
/// discriminator and span losses), so the joint value never lives on a tape.
pub fn joint_loss(l_mlm: f64, l_rtd: f64, l_csp: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.lambda1 * l_mlm + w.lambda2 * l_rtd + w.lambda3 * l_csp)
}

/// Token-mean NLL of a target sequence given an already-formatted input:
/// encode, teacher-force the decoder on `target[..T-1]`, and score
/// `target[1..]`. `target` must begin with BOS; padding ids in the label
/// region are ignored.
pub fn grounded_loss<S: Scalar>(
    mt: &ModelTensors<S>,
    config: &ModelConfig,
    input: &[u32],
    input_mask: &[bool],
    target: &[u32],
    pad_id: u32,
) -> Result<Tensor<S>> {
    if target.len() < 2 {
        return Err(CoreError::EmptySequence { op: "grounded_loss" });
    }
    let memory = encode(mt, config, input, input_mask, None)?;
    let logits = decode_teacher_forced(
        mt,
        config,
        &memory,
        input_mask,
        &target[..target.len() - 1],
    )?;
    logits.cross_entropy_from_logits(&target[1..], Some(pad_id))
}
