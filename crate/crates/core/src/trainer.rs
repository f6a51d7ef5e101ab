//! Training loops: the joint phase-1 step and the grounded/fine-tune step.
//!
//! A phase-1 step runs the protocol sequentially per example: generator
//! forward, masked-token backward (updating the shared embeddings), then —
//! with the generator's samples detached — the discriminator and
//! encoder-decoder forward, and one backward for the weighted detection and
//! span losses (which can only reach the embedding delta, never the shared
//! table). Gradients from both backwards accumulate across the batch into a
//! single clipped AdamW update, so there is exactly one optimizer step per
//! combined pass.
//!
//! Randomness is drawn from one per-example stream keyed by (seed, running
//! example counter), so corruption plans survive checkpoint round-trips and
//! never depend on batch boundaries.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, MASK, PAD};
use crate::error::Result;
use crate::model::{
    decode_teacher_forced, discriminator_forward, encode, generator_forward, ModelConfig,
    Parameters,
};
use crate::objectives::{
    apply_mlm_mask, build_csp_plan, build_mlm_plan, csp_decoder_input, csp_loss, joint_loss,
    mlm_loss, rtd_labels, rtd_loss, sample_discriminator_input, CspMode, LossWeights,
};
use crate::optim::{adamw_step, clip_global_norm, lr_at_step, AdamState, TrainConfig};
use crate::rng::example_rng;
use crate::tensor::{backward, Array, Tape};

// ── Corruption settings ──────────────────────────────────────────────

/// Knobs for phase-1 input corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub mask_rate: f64,
    pub mean_span: f64,
    pub sentence_mode: bool,
    /// Token ids that end a sentence (used only in sentence mode).
    pub delimiters: Vec<u32>,
}

impl Default for CorruptionConfig {
    fn default() -> CorruptionConfig {
        CorruptionConfig {
            mask_rate: 0.15,
            mean_span: 3.0,
            sentence_mode: false,
            delimiters: Vec::new(),
        }
    }
}

impl CorruptionConfig {
    pub fn mode(&self) -> CspMode {
        if self.sentence_mode {
            CspMode::Sentence
        } else {
            CspMode::Span
        }
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

/// One JSON line per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_mlm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_rtd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_csp: Option<f64>,
    /// The value being optimized: the weighted joint loss in phase 1, the
    /// token-mean NLL otherwise.
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

// ── Trainer ──────────────────────────────────────────────────────────

/// Owns the parameters, optimizer state, and the example counter that keys
/// per-example randomness.
pub struct Trainer {
    pub params: Parameters<f32>,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub corruption: CorruptionConfig,
    pub weights: LossWeights,
    pub opt: AdamState<f32>,
    /// Running count of corruption draws; persisted so resumed runs keep
    /// sampling the stream where they left off.
    pub next_draw: u64,
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        train_config: TrainConfig,
        corruption: CorruptionConfig,
        weights: LossWeights,
    ) -> Result<Trainer> {
        model_config.validate()?;
        train_config.validate()?;
        weights.validate()?;
        let params = Parameters::init(&model_config, train_config.seed);
        Ok(Trainer {
            params,
            model_config,
            train_config,
            corruption,
            weights,
            opt: AdamState::new(),
            next_draw: 0,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    fn accumulate(acc: &mut [(String, Array<f32>)], grads: &[(String, Array<f32>)], scale: f64) {
        if scale == 0.0 {
            return;
        }
        for ((aname, a), (gname, g)) in acc.iter_mut().zip(grads) {
            debug_assert_eq!(aname, gname);
            let s = scale as f32;
            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                *av += s * gv;
            }
        }
    }

    fn zero_grads(&self) -> Vec<(String, Array<f32>)> {
        let mut acc = Vec::new();
        self.params.visit(&mut |name, a| {
            acc.push((name, Array::zeros(a.shape())));
        });
        acc
    }

    /// One joint pre-training step over a batch of token windows.
    pub fn pretrain_step(&mut self, batch: &[Vec<u32>]) -> Result<StepMetrics> {
        assert!(!batch.is_empty(), "empty batch");
        let t = self.opt.step + 1;
        let lr = lr_at_step(t, &self.train_config);
        let mut acc = self.zero_grads();
        let inv_batch = 1.0 / batch.len() as f64;
        let (mut sum_mlm, mut sum_rtd, mut sum_csp) = (0.0, 0.0, 0.0);

        for tokens in batch {
            let mut rng = example_rng(self.train_config.seed, self.next_draw);
            self.next_draw += 1;
            let mask = vec![true; tokens.len()];

            // Generator pass: masked-token prediction over E_G.
            let tape_g: Tape<f32> = Tape::new();
            let mt_g = self.params.leaf(&tape_g);
            let plan = build_mlm_plan(tokens, self.corruption.mask_rate, &mut rng)?;
            let masked = apply_mlm_mask(tokens, &plan, MASK);
            let gen_logits = generator_forward(&mt_g, &self.model_config, &masked, &mask)?;
            let l_mlm = mlm_loss(&gen_logits, &plan)?;
            sum_mlm += l_mlm.item() as f64;
            if self.weights.lambda1 > 0.0 {
                let grads = backward(&l_mlm)?;
                let named = self.params.grads_by_name(&mt_g, &grads);
                Self::accumulate(&mut acc, &named, self.weights.lambda1 * inv_batch);
            }

            // Sample the discriminator input from the generator's softmax;
            // plain values cross here, so no gradient can flow back.
            let corrupted =
                sample_discriminator_input(tokens, &plan, &gen_logits.value(), &mut rng);
            let labels = rtd_labels(tokens, &corrupted);

            // Discriminator + encoder-decoder pass over E_D.
            let tape_d: Tape<f32> = Tape::new();
            let mt_d = self.params.leaf(&tape_d);
            let scores =
                discriminator_forward(&mt_d, &self.model_config, &corrupted, &mask, None)?;
            let l_rtd = rtd_loss(&scores, &labels);
            sum_rtd += l_rtd.item() as f64;

            let span = build_csp_plan(
                tokens,
                self.corruption.mask_rate,
                self.corruption.mean_span,
                self.corruption.mode(),
                &self.corruption.delimiters,
                &mut rng,
            )?;
            let span_mask = vec![true; span.corrupted.len()];
            let memory = encode(&mt_d, &self.model_config, &span.corrupted, &span_mask, None)?;
            let dec_input = csp_decoder_input(&span.target);
            let dec_logits = decode_teacher_forced(
                &mt_d,
                &self.model_config,
                &memory,
                &span_mask,
                &dec_input,
            )?;
            let l_csp = csp_loss(&dec_logits, &span.target)?;
            sum_csp += l_csp.item() as f64;

            let weighted = l_rtd
                .scale(self.weights.lambda2)
                .add(&l_csp.scale(self.weights.lambda3));
            if self.weights.lambda2 > 0.0 || self.weights.lambda3 > 0.0 {
                let grads = backward(&weighted)?;
                let named = self.params.grads_by_name(&mt_d, &grads);
                Self::accumulate(&mut acc, &named, inv_batch);
            }
        }

        let grad_norm = clip_global_norm(&mut acc, self.train_config.clip_norm);
        adamw_step(&mut self.params, &acc, &mut self.opt, &self.train_config, lr)?;

        let (l_mlm, l_rtd, l_csp) = (
            sum_mlm * inv_batch,
            sum_rtd * inv_batch,
            sum_csp * inv_batch,
        );
        Ok(StepMetrics {
            step: self.opt.step,
            phase: "pretrain".into(),
            l_mlm: Some(l_mlm),
            l_rtd: Some(l_rtd),
            l_csp: Some(l_csp),
            loss: joint_loss(l_mlm, l_rtd, l_csp, &self.weights)?,
            grad_norm,
            lr,
        })
    }

    /// One conditional-likelihood step over (input, target) pairs — the
    /// grounded phase-2 objective and plain fine-tuning share it.
    pub fn grounded_step(&mut self, batch: &[(Vec<u32>, Vec<u32>)], phase: &str) -> Result<StepMetrics> {
        assert!(!batch.is_empty(), "empty batch");
        let t = self.opt.step + 1;
        let lr = lr_at_step(t, &self.train_config);
        let mut acc = self.zero_grads();
        let inv_batch = 1.0 / batch.len() as f64;
        let mut sum_nll = 0.0;

        for (input, target) in batch {
            let tape: Tape<f32> = Tape::new();
            let mt = self.params.leaf(&tape);
            let mask = vec![true; input.len()];
            let loss = crate::objectives::grounded_loss(
                &mt,
                &self.model_config,
                input,
                &mask,
                target,
                PAD,
            )?;
            sum_nll += loss.item() as f64;
            let grads = backward(&loss)?;
            let named = self.params.grads_by_name(&mt, &grads);
            Self::accumulate(&mut acc, &named, inv_batch);
        }

        let grad_norm = clip_global_norm(&mut acc, self.train_config.clip_norm);
        adamw_step(&mut self.params, &acc, &mut self.opt, &self.train_config, lr)?;
        Ok(StepMetrics {
            step: self.opt.step,
            phase: phase.into(),
            l_mlm: None,
            l_rtd: None,
            l_csp: None,
            loss: sum_nll * inv_batch,
            grad_norm,
            lr,
        })
    }
}

/// Chops a token stream into fixed-length windows for phase 1, dropping a
/// tail too short to corrupt.
pub fn token_windows(ids: &[u32], window: usize) -> Vec<Vec<u32>> {
    assert!(window >= 4, "windows must hold at least one span");
    ids.chunks(window)
        .filter(|c| c.len() >= 4)
        .map(|c| c.to_vec())
        .collect()
}

/// Round-robin batches over a corpus: step `i` takes `batch` consecutive
/// items starting at `i·batch mod len`, wrapping around.
pub fn batch_at<T: Clone>(items: &[T], batch: usize, step_index: u64) -> Vec<T> {
    assert!(!items.is_empty());
    let start = (step_index as usize * batch) % items.len();
    (0..batch)
        .map(|i| items[(start + i) % items.len()].clone())
        .collect()
}

/// Decoder input/target framing for a summary: `[BOS, y…, EOS]`.
pub fn frame_target(summary_ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(summary_ids.len() + 2);
    v.push(BOS);
    v.extend_from_slice(summary_ids);
    v.push(crate::data::EOS);
    v
}
