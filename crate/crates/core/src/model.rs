//! The encoder-decoder model with its replaced-token-detection generator.
//!
//! One parameter set holds four weight groups: the shared token embeddings
//! `E_G` with the discriminator delta `E_Δ`, the disentangled-attention
//! encoder, the causal decoder with cross-attention, and a small generator
//! stack used only during pre-training. The discriminator/encoder embedding
//! table is never a leaf of its own: every tape rebuilds it as
//! `E_D = stop_gradient(E_G) + E_Δ`, so discriminator losses can only move
//! `E_Δ` while the generator's masked-language loss moves `E_G`. Output
//! heads are weight-tied: the generator's to `E_G`, the decoder's to `E_D`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    dec_layer_forward, normal_init, DaLayerParams, DaLayerTensors, DecLayerParams,
    DecLayerTensors, RelativeBucketer, LN_EPS,
};
use crate::data::BOS;
use crate::decode::StepScorer;
use crate::error::{CoreError, Result};
use crate::fie::{encode_hidden, FiEConfig, ScoreCounter};
use crate::rng::init_rng;
use crate::tensor::{Array, Scalar, Tape, Tensor};

// ── Configuration ────────────────────────────────────────────────────

/// Model shape. All counts positive; `d` divisible by `heads`; the
/// generator is at most as deep as the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub l_enc: usize,
    pub l_dec: usize,
    pub l_gen: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub k: usize,
    #[serde(default)]
    pub fie: Option<FiEConfig>,
}

impl ModelConfig {
    /// Desk-scale default: runs full pre-training in minutes on a laptop.
    pub fn desk(vocab: usize) -> ModelConfig {
        ModelConfig {
            l_enc: 4,
            l_dec: 4,
            l_gen: 2,
            d: 128,
            heads: 4,
            d_ff: 512,
            vocab,
            k: 128,
            fie: None,
        }
    }

    /// Minimal config for fast tests and gradient checks.
    pub fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            l_enc: 2,
            l_dec: 2,
            l_gen: 1,
            d: 16,
            heads: 2,
            d_ff: 32,
            vocab,
            k: 8,
            fie: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l_enc", self.l_enc),
            ("l_dec", self.l_dec),
            ("l_gen", self.l_gen),
            ("d", self.d),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.l_gen > self.l_enc {
            return Err(CoreError::Config(format!(
                "generator depth {} exceeds encoder depth {}",
                self.l_gen, self.l_enc
            )));
        }
        if let Some(fie) = &self.fie {
            fie.validate(self.l_enc)?;
        }
        Ok(())
    }

    pub fn bucketer(&self) -> RelativeBucketer {
        RelativeBucketer::new(self.k)
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// Every trainable array in the model.
#[derive(Debug, Clone)]
pub struct Parameters<S: Scalar> {
    pub e_g: Array<S>,
    pub e_delta: Array<S>,
    pub rel: Array<S>,
    pub encoder: Vec<DaLayerParams<S>>,
    pub enc_final_gain: Array<S>,
    pub enc_final_bias: Array<S>,
    pub generator: Vec<DaLayerParams<S>>,
    pub gen_final_gain: Array<S>,
    pub gen_final_bias: Array<S>,
    pub decoder: Vec<DecLayerParams<S>>,
    pub dec_final_gain: Array<S>,
    pub dec_final_bias: Array<S>,
    pub rtd_w: Array<S>,
    pub rtd_b: Array<S>,
}

impl<S: Scalar> Parameters<S> {
    /// Seeded initialization: Normal(0, 0.02) matrices, unit layer-norm
    /// gains, zero biases, and an exactly-zero embedding delta.
    pub fn init(config: &ModelConfig, seed: u64) -> Parameters<S> {
        config.validate().expect("invalid model config");
        let mut rng: ChaCha8Rng = init_rng(seed);
        let d = config.d;
        let e_g = normal_init(config.vocab, d, &mut rng);
        let rel = normal_init(2 * config.k, d, &mut rng);
        let encoder = (0..config.l_enc)
            .map(|_| DaLayerParams::init(d, config.d_ff, &mut rng))
            .collect();
        let generator = (0..config.l_gen)
            .map(|_| DaLayerParams::init(d, config.d_ff, &mut rng))
            .collect();
        let decoder = (0..config.l_dec)
            .map(|_| DecLayerParams::init(d, config.d_ff, &mut rng))
            .collect();
        let rtd_w = normal_init(d, 1, &mut rng);
        Parameters {
            e_g,
            e_delta: Array::zeros(&[config.vocab, d]),
            rel,
            encoder,
            enc_final_gain: ones(d),
            enc_final_bias: Array::zeros(&[d]),
            generator,
            gen_final_gain: ones(d),
            gen_final_bias: Array::zeros(&[d]),
            decoder,
            dec_final_gain: ones(d),
            dec_final_bias: Array::zeros(&[d]),
            rtd_w,
            rtd_b: Array::zeros(&[1]),
        }
    }

    /// Visits `(name, array)` for every trainable tensor, in a stable order
    /// shared with `visit_mut` (checkpoints and the optimizer rely on it).
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array<S>)) {
        f("embed.e_g".into(), &self.e_g);
        f("embed.e_delta".into(), &self.e_delta);
        f("rel.table".into(), &self.rel);
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.visit(&format!("encoder.{i}"), f);
        }
        f("encoder.final_gain".into(), &self.enc_final_gain);
        f("encoder.final_bias".into(), &self.enc_final_bias);
        for (i, layer) in self.generator.iter().enumerate() {
            layer.visit(&format!("generator.{i}"), f);
        }
        f("generator.final_gain".into(), &self.gen_final_gain);
        f("generator.final_bias".into(), &self.gen_final_bias);
        for (i, layer) in self.decoder.iter().enumerate() {
            layer.visit(&format!("decoder.{i}"), f);
        }
        f("decoder.final_gain".into(), &self.dec_final_gain);
        f("decoder.final_bias".into(), &self.dec_final_bias);
        f("rtd.w".into(), &self.rtd_w);
        f("rtd.b".into(), &self.rtd_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array<S>)) {
        f("embed.e_g".into(), &mut self.e_g);
        f("embed.e_delta".into(), &mut self.e_delta);
        f("rel.table".into(), &mut self.rel);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            layer.visit_mut(&format!("encoder.{i}"), f);
        }
        f("encoder.final_gain".into(), &mut self.enc_final_gain);
        f("encoder.final_bias".into(), &mut self.enc_final_bias);
        for (i, layer) in self.generator.iter_mut().enumerate() {
            layer.visit_mut(&format!("generator.{i}"), f);
        }
        f("generator.final_gain".into(), &mut self.gen_final_gain);
        f("generator.final_bias".into(), &mut self.gen_final_bias);
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            layer.visit_mut(&format!("decoder.{i}"), f);
        }
        f("decoder.final_gain".into(), &mut self.dec_final_gain);
        f("decoder.final_bias".into(), &mut self.dec_final_bias);
        f("rtd.w".into(), &mut self.rtd_w);
        f("rtd.b".into(), &mut self.rtd_b);
    }

    /// Total scalar count across all trainable tensors.
    pub fn num_parameters(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, a| total += a.numel());
        total
    }

    /// The exported discriminator embedding table: `E_G + E_Δ` as plain
    /// values (the training-time forward path computes the same sum behind
    /// a stop-gradient).
    pub fn materialize_discriminator_embeddings(&self) -> Array<S> {
        let mut out = self.e_g.clone();
        out.add_assign(&self.e_delta);
        out
    }
}

fn ones<S: Scalar>(d: usize) -> Array<S> {
    Array::new(vec![d], vec![S::one(); d])
}

// ── Tape-registered model ────────────────────────────────────────────

/// All parameters registered as leaves on one tape, plus the derived
/// discriminator embedding `e_d = stop_gradient(e_g) + e_delta`.
pub struct ModelTensors<S: Scalar> {
    pub e_g: Tensor<S>,
    pub e_delta: Tensor<S>,
    pub e_d: Tensor<S>,
    pub rel: Tensor<S>,
    pub encoder: Vec<DaLayerTensors<S>>,
    pub enc_final_gain: Tensor<S>,
    pub enc_final_bias: Tensor<S>,
    pub generator: Vec<DaLayerTensors<S>>,
    pub gen_final_gain: Tensor<S>,
    pub gen_final_bias: Tensor<S>,
    pub decoder: Vec<DecLayerTensors<S>>,
    pub dec_final_gain: Tensor<S>,
    pub dec_final_bias: Tensor<S>,
    pub rtd_w: Tensor<S>,
    pub rtd_b: Tensor<S>,
}

impl<S: Scalar> Parameters<S> {
    pub fn leaf(&self, tape: &Tape<S>) -> ModelTensors<S> {
        let e_g = tape.leaf(self.e_g.clone());
        let e_delta = tape.leaf(self.e_delta.clone());
        let e_d = e_g.stop_gradient().add(&e_delta);
        ModelTensors {
            e_g,
            e_delta,
            e_d,
            rel: tape.leaf(self.rel.clone()),
            encoder: self.encoder.iter().map(|l| l.leaf(tape)).collect(),
            enc_final_gain: tape.leaf(self.enc_final_gain.clone()),
            enc_final_bias: tape.leaf(self.enc_final_bias.clone()),
            generator: self.generator.iter().map(|l| l.leaf(tape)).collect(),
            gen_final_gain: tape.leaf(self.gen_final_gain.clone()),
            gen_final_bias: tape.leaf(self.gen_final_bias.clone()),
            decoder: self.decoder.iter().map(|l| l.leaf(tape)).collect(),
            dec_final_gain: tape.leaf(self.dec_final_gain.clone()),
            dec_final_bias: tape.leaf(self.dec_final_bias.clone()),
            rtd_w: tape.leaf(self.rtd_w.clone()),
            rtd_b: tape.leaf(self.rtd_b.clone()),
        }
    }

    /// Collects gradients in visit order for the tensors produced by
    /// `leaf`, zero-filled where no path reached a leaf.
    pub fn grads_by_name(
        &self,
        mt: &ModelTensors<S>,
        grads: &crate::tensor::Gradients<S>,
    ) -> Vec<(String, Array<S>)> {
        let handles = mt.handles();
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name));
        assert_eq!(names.len(), handles.len(), "visit order out of sync");
        names
            .into_iter()
            .zip(handles)
            .map(|(name, t)| (name, grads.of_or_zeros(t)))
            .collect()
    }
}

impl<S: Scalar> ModelTensors<S> {
    /// Leaf handles in the same order `Parameters::visit` emits names.
    pub fn handles(&self) -> Vec<&Tensor<S>> {
        let mut v: Vec<&Tensor<S>> = vec![&self.e_g, &self.e_delta, &self.rel];
        for l in &self.encoder {
            v.extend([
                &l.w_qc, &l.w_kc, &l.w_v, &l.w_qr, &l.w_kr,
                &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias,
                &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2,
            ]);
        }
        v.extend([&self.enc_final_gain, &self.enc_final_bias]);
        for l in &self.generator {
            v.extend([
                &l.w_qc, &l.w_kc, &l.w_v, &l.w_qr, &l.w_kr,
                &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias,
                &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2,
            ]);
        }
        v.extend([&self.gen_final_gain, &self.gen_final_bias]);
        for l in &self.decoder {
            v.extend([
                &l.w_q, &l.w_k, &l.w_v, &l.w_kr,
                &l.cross_w_q, &l.cross_w_k, &l.cross_w_v,
                &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias,
                &l.ln3_gain, &l.ln3_bias,
                &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2,
            ]);
        }
        v.extend([&self.dec_final_gain, &self.dec_final_bias]);
        v.extend([&self.rtd_w, &self.rtd_b]);
        v
    }
}

// ── Forward passes ───────────────────────────────────────────────────

/// Encoder forward over discriminator embeddings. `key_mask` marks real
/// tokens (false = padding). Uses the chunked schedule when configured.
pub fn encode<S: Scalar>(
    mt: &ModelTensors<S>,
    config: &ModelConfig,
    ids: &[u32],
    key_mask: &[bool],
    counter: Option<&ScoreCounter>,
) -> Result<Tensor<S>> {
    if ids.is_empty() {
        return Err(CoreError::EmptySequence { op: "encode" });
    }
    assert_eq!(ids.len(), key_mask.len(), "key mask length mismatch");
    let h0 = mt.e_d.embedding_lookup(ids)?;
    let h = encode_hidden(
        h0,
        &mt.encoder,
        &mt.rel,
        config.heads,
        &config.bucketer(),
        key_mask,
        config.fie.as_ref(),
        counter,
    )?;
    Ok(h.layer_norm(&mt.enc_final_gain, &mt.enc_final_bias, LN_EPS))
}

/// Teacher-forced decoder: causal self-attention over the target prefix and
/// cross-attention over `memory`. Returns next-token logits `[T, V]` from
/// the head tied to the discriminator embeddings. `target` must begin with
/// the start-of-sequence id.
pub fn decode_teacher_forced<S: Scalar>(
    mt: &ModelTensors<S>,
    config: &ModelConfig,
    memory: &Tensor<S>,
    mem_mask: &[bool],
    target: &[u32],
) -> Result<Tensor<S>> {
    if target.is_empty() {
        return Err(CoreError::EmptySequence { op: "decode" });
    }
    assert_eq!(target[0], BOS, "decoder input must begin with BOS");
    let mut h = mt.e_d.embedding_lookup(target)?;
    for layer in &mt.decoder {
        h = dec_layer_forward(
            &h,
            memory,
            &mt.rel,
            layer,
            config.heads,
            &config.bucketer(),
            mem_mask,
        )?;
    }
    let h = h.layer_norm(&mt.dec_final_gain, &mt.dec_final_bias, LN_EPS);
    h.matmul(&mt.e_d.transpose())
}

/// Generator forward over the shared embeddings `E_G`; masked-token logits
/// from the head tied to `E_G`.
pub fn generator_forward<S: Scalar>(
    mt: &ModelTensors<S>,
    config: &ModelConfig,
    ids: &[u32],
    key_mask: &[bool],
) -> Result<Tensor<S>> {
    if ids.is_empty() {
        return Err(CoreError::EmptySequence { op: "generator" });
    }
    let h0 = mt.e_g.embedding_lookup(ids)?;
    let h = encode_hidden(
        h0,
        &mt.generator,
        &mt.rel,
        config.heads,
        &config.bucketer(),
        key_mask,
        None,
        None,
    )?;
    let h = h.layer_norm(&mt.gen_final_gain, &mt.gen_final_bias, LN_EPS);
    h.matmul(&mt.e_g.transpose())
}

/// Full encoder plus the binary replaced-token head. Returns one logit per
/// position (shape `[N, 1]`); positive means "original token".
pub fn discriminator_forward<S: Scalar>(
    mt: &ModelTensors<S>,
    config: &ModelConfig,
    ids: &[u32],
    key_mask: &[bool],
    counter: Option<&ScoreCounter>,
) -> Result<Tensor<S>> {
    let h = encode(mt, config, ids, key_mask, counter)?;
    Ok(h.matmul(&mt.rtd_w)?.add(&mt.rtd_b))
}

// ── Decode-time scorer ───────────────────────────────────────────────

/// Encodes an input once and scores decoder continuations for beam or
/// greedy search. Each step replays the teacher-forced decoder over the
/// prefix on a gradient-free tape.
pub struct Seq2SeqScorer<'a> {
    params: &'a Parameters<f32>,
    config: &'a ModelConfig,
    memory: Array<f32>,
    mem_mask: Vec<bool>,
}

impl<'a> Seq2SeqScorer<'a> {
    pub fn new(
        params: &'a Parameters<f32>,
        config: &'a ModelConfig,
        input_ids: &[u32],
    ) -> Result<Seq2SeqScorer<'a>> {
        let tape: Tape<f32> = Tape::new();
        let mt = params.leaf_frozen(&tape);
        let mask = vec![true; input_ids.len()];
        let memory = encode(&mt, config, input_ids, &mask, None)?.value();
        Ok(Seq2SeqScorer {
            params,
            config,
            memory,
            mem_mask: mask,
        })
    }
}

impl<S: Scalar> Parameters<S> {
    /// Registers parameters as constants: forward-only, no backward graph.
    pub fn leaf_frozen(&self, tape: &Tape<S>) -> ModelTensors<S> {
        let e_g = tape.constant(self.e_g.clone());
        let e_delta = tape.constant(self.e_delta.clone());
        let e_d = e_g.stop_gradient().add(&e_delta);
        let da = |l: &DaLayerParams<S>| DaLayerTensors {
            w_qc: tape.constant(l.w_qc.clone()),
            w_kc: tape.constant(l.w_kc.clone()),
            w_v: tape.constant(l.w_v.clone()),
            w_qr: tape.constant(l.w_qr.clone()),
            w_kr: tape.constant(l.w_kr.clone()),
            ln1_gain: tape.constant(l.ln1_gain.clone()),
            ln1_bias: tape.constant(l.ln1_bias.clone()),
            ln2_gain: tape.constant(l.ln2_gain.clone()),
            ln2_bias: tape.constant(l.ln2_bias.clone()),
            ff_w1: tape.constant(l.ff_w1.clone()),
            ff_b1: tape.constant(l.ff_b1.clone()),
            ff_w2: tape.constant(l.ff_w2.clone()),
            ff_b2: tape.constant(l.ff_b2.clone()),
        };
        let dec = |l: &DecLayerParams<S>| DecLayerTensors {
            w_q: tape.constant(l.w_q.clone()),
            w_k: tape.constant(l.w_k.clone()),
            w_v: tape.constant(l.w_v.clone()),
            w_kr: tape.constant(l.w_kr.clone()),
            cross_w_q: tape.constant(l.cross_w_q.clone()),
            cross_w_k: tape.constant(l.cross_w_k.clone()),
            cross_w_v: tape.constant(l.cross_w_v.clone()),
            ln1_gain: tape.constant(l.ln1_gain.clone()),
            ln1_bias: tape.constant(l.ln1_bias.clone()),
            ln2_gain: tape.constant(l.ln2_gain.clone()),
            ln2_bias: tape.constant(l.ln2_bias.clone()),
            ln3_gain: tape.constant(l.ln3_gain.clone()),
            ln3_bias: tape.constant(l.ln3_bias.clone()),
            ff_w1: tape.constant(l.ff_w1.clone()),
            ff_b1: tape.constant(l.ff_b1.clone()),
            ff_w2: tape.constant(l.ff_w2.clone()),
            ff_b2: tape.constant(l.ff_b2.clone()),
        };
        ModelTensors {
            e_g,
            e_delta,
            e_d,
            rel: tape.constant(self.rel.clone()),
            encoder: self.encoder.iter().map(&da).collect(),
            enc_final_gain: tape.constant(self.enc_final_gain.clone()),
            enc_final_bias: tape.constant(self.enc_final_bias.clone()),
            generator: self.generator.iter().map(&da).collect(),
            gen_final_gain: tape.constant(self.gen_final_gain.clone()),
            gen_final_bias: tape.constant(self.gen_final_bias.clone()),
            decoder: self.decoder.iter().map(&dec).collect(),
            dec_final_gain: tape.constant(self.dec_final_gain.clone()),
            dec_final_bias: tape.constant(self.dec_final_bias.clone()),
            rtd_w: tape.constant(self.rtd_w.clone()),
            rtd_b: tape.constant(self.rtd_b.clone()),
        }
    }
}

impl StepScorer for Seq2SeqScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn step_log_probs(&self, prefix: &[u32]) -> Vec<f64> {
        let tape: Tape<f32> = Tape::new();
        let mt = self.params.leaf_frozen(&tape);
        let memory = tape.constant(self.memory.clone());
        let logits = decode_teacher_forced(&mt, self.config, &memory, &self.mem_mask, prefix)
            .expect("decode failed during scoring");
        let v = self.config.vocab;
        let arr = logits.value();
        let last = &arr.data()[(prefix.len() - 1) * v..prefix.len() * v];
        // Log-softmax in f64 for stable beam accumulation.
        let mx = last.iter().fold(f64::MIN, |m, &x| m.max(x as f64));
        let z: f64 = last.iter().map(|&x| ((x as f64) - mx).exp()).sum();
        let ln_z = z.ln();
        last.iter().map(|&x| (x as f64) - mx - ln_z).collect()
    }
}
