//! Attention mechanisms: disentangled attention for the encoder stacks and
//! the decoder's causal self-attention and cross-attention.
//!
//! Disentangled attention scores a query/key pair by three terms —
//! content-to-content, content-to-position, and position-to-content — where
//! position terms index a shared relative-position embedding table through a
//! clamped bucket function. The decoder keeps the content-to-position term
//! for its causal self-attention but drops position-to-content, and its
//! cross-attention is content-only; each variant scales by the square root
//! of (number of terms x head width).
//!
//! All layers are pre-norm residual blocks: LayerNorm feeds the sublayer and
//! the sublayer output is added back to the unnormalized input.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{concat, Array, Scalar, Tape, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Draws a fresh `[rows, cols]` matrix from Normal(0, 0.02), sampling in f64
/// so every precision sees the same stream.
pub fn normal_init<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array<S> {
    let dist = Normal::new(0.0f64, 0.02).unwrap();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(dist.sample(rng)))
        .collect();
    Array::new(vec![rows, cols], data)
}

// ── Relative buckets ─────────────────────────────────────────────────

/// Clamped relative-distance bucketing with maximum distance `k`:
/// bucket(i, j) is 0 when i-j <= -k, 2k-1 when i-j >= k, and i-j+k between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeBucketer {
    k: usize,
}

impl RelativeBucketer {
    pub fn new(k: usize) -> RelativeBucketer {
        assert!(k >= 1, "max relative distance must be at least 1");
        RelativeBucketer { k }
    }

    pub fn num_buckets(&self) -> usize {
        2 * self.k
    }

    pub fn bucket(&self, i: usize, j: usize) -> u32 {
        let k = self.k as i64;
        let delta = i as i64 - j as i64;
        if delta <= -k {
            0
        } else if delta >= k {
            (2 * k - 1) as u32
        } else {
            (delta + k) as u32
        }
    }

    /// Row-major `[n_q, n_k]` matrix of bucket(i, j) — the query-to-key
    /// (content-to-position) indices.
    pub fn c2p_matrix(&self, n_q: usize, n_k: usize) -> Vec<u32> {
        let mut idx = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q {
            for j in 0..n_k {
                idx.push(self.bucket(i, j));
            }
        }
        idx
    }

    /// Row-major `[n_q, n_k]` matrix of bucket(j, i) — the key-to-query
    /// (position-to-content) indices.
    pub fn p2c_matrix(&self, n_q: usize, n_k: usize) -> Vec<u32> {
        let mut idx = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q {
            for j in 0..n_k {
                idx.push(self.bucket(j, i));
            }
        }
        idx
    }
}

// ── Disentangled-attention layer ─────────────────────────────────────

/// One encoder layer's trainable arrays: attention projections, the two
/// layer norms, and the feed-forward sublayer. The relative-position table
/// is shared across layers and passed separately.
#[derive(Debug, Clone)]
pub struct DaLayerParams<S: Scalar> {
    pub w_qc: Array<S>,
    pub w_kc: Array<S>,
    pub w_v: Array<S>,
    pub w_qr: Array<S>,
    pub w_kr: Array<S>,
    pub ln1_gain: Array<S>,
    pub ln1_bias: Array<S>,
    pub ln2_gain: Array<S>,
    pub ln2_bias: Array<S>,
    pub ff_w1: Array<S>,
    pub ff_b1: Array<S>,
    pub ff_w2: Array<S>,
    pub ff_b2: Array<S>,
}

/// The same layer with every array registered on a tape.
pub struct DaLayerTensors<S: Scalar> {
    pub w_qc: Tensor<S>,
    pub w_kc: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_qr: Tensor<S>,
    pub w_kr: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub ff_w1: Tensor<S>,
    pub ff_b1: Tensor<S>,
    pub ff_w2: Tensor<S>,
    pub ff_b2: Tensor<S>,
}

impl<S: Scalar> DaLayerParams<S> {
    pub fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> DaLayerParams<S> {
        DaLayerParams {
            w_qc: normal_init(d, d, rng),
            w_kc: normal_init(d, d, rng),
            w_v: normal_init(d, d, rng),
            w_qr: normal_init(d, d, rng),
            w_kr: normal_init(d, d, rng),
            ln1_gain: Array::new(vec![d], vec![S::one(); d]),
            ln1_bias: Array::zeros(&[d]),
            ln2_gain: Array::new(vec![d], vec![S::one(); d]),
            ln2_bias: Array::zeros(&[d]),
            ff_w1: normal_init(d, d_ff, rng),
            ff_b1: Array::zeros(&[d_ff]),
            ff_w2: normal_init(d_ff, d, rng),
            ff_b2: Array::zeros(&[d]),
        }
    }

    pub fn leaf(&self, tape: &Tape<S>) -> DaLayerTensors<S> {
        DaLayerTensors {
            w_qc: tape.leaf(self.w_qc.clone()),
            w_kc: tape.leaf(self.w_kc.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            w_qr: tape.leaf(self.w_qr.clone()),
            w_kr: tape.leaf(self.w_kr.clone()),
            ln1_gain: tape.leaf(self.ln1_gain.clone()),
            ln1_bias: tape.leaf(self.ln1_bias.clone()),
            ln2_gain: tape.leaf(self.ln2_gain.clone()),
            ln2_bias: tape.leaf(self.ln2_bias.clone()),
            ff_w1: tape.leaf(self.ff_w1.clone()),
            ff_b1: tape.leaf(self.ff_b1.clone()),
            ff_w2: tape.leaf(self.ff_w2.clone()),
            ff_b2: tape.leaf(self.ff_b2.clone()),
        }
    }

    /// Calls `f` with `(name, array)` for every trainable tensor.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<S>)) {
        f(format!("{prefix}.w_qc"), &self.w_qc);
        f(format!("{prefix}.w_kc"), &self.w_kc);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_qr"), &self.w_qr);
        f(format!("{prefix}.w_kr"), &self.w_kr);
        f(format!("{prefix}.ln1_gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &self.ln1_bias);
        f(format!("{prefix}.ln2_gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &self.ln2_bias);
        f(format!("{prefix}.ff_w1"), &self.ff_w1);
        f(format!("{prefix}.ff_b1"), &self.ff_b1);
        f(format!("{prefix}.ff_w2"), &self.ff_w2);
        f(format!("{prefix}.ff_b2"), &self.ff_b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array<S>)) {
        f(format!("{prefix}.w_qc"), &mut self.w_qc);
        f(format!("{prefix}.w_kc"), &mut self.w_kc);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_qr"), &mut self.w_qr);
        f(format!("{prefix}.w_kr"), &mut self.w_kr);
        f(format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        f(format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
        f(format!("{prefix}.ff_w1"), &mut self.ff_w1);
        f(format!("{prefix}.ff_b1"), &mut self.ff_b1);
        f(format!("{prefix}.ff_w2"), &mut self.ff_w2);
        f(format!("{prefix}.ff_b2"), &mut self.ff_b2);
    }
}

/// Per-head disentangled attention logits over the (already normalized)
/// hidden states `x`: content + content-to-position + position-to-content,
/// scaled by 1/sqrt(3 * d/h). Returns one `[N, N]` tensor per head.
pub fn da_attention_logits<S: Scalar>(
    x: &Tensor<S>,
    rel: &Tensor<S>,
    layer: &DaLayerTensors<S>,
    heads: usize,
    bucketer: &RelativeBucketer,
) -> Result<Vec<Tensor<S>>> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    assert_eq!(d % heads, 0, "model width must be divisible by head count");
    let dh = d / heads;
    assert_eq!(
        rel.shape()[0],
        bucketer.num_buckets(),
        "relative table rows must equal bucket count"
    );
    let scale = 1.0 / (3.0 * dh as f64).sqrt();

    let qc = x.matmul(&layer.w_qc)?;
    let kc = x.matmul(&layer.w_kc)?;
    let kr = rel.matmul(&layer.w_kr)?; // [2k, d]
    let qr = rel.matmul(&layer.w_qr)?; // [2k, d]
    let c2p_idx = bucketer.c2p_matrix(n, n);
    let p2c_idx = bucketer.p2c_matrix(n, n);

    let mut per_head = Vec::with_capacity(heads);
    for hh in 0..heads {
        let q_h = qc.slice_cols(hh * dh, dh);
        let k_h = kc.slice_cols(hh * dh, dh);
        let kr_h = kr.slice_cols(hh * dh, dh);
        let qr_h = qr.slice_cols(hh * dh, dh);
        let content = q_h.matmul(&k_h.transpose())?; // [N, N]
        let c2p_all = q_h.matmul(&kr_h.transpose())?; // [N, 2k]
        let c2p = c2p_all.bucket_gather(&c2p_idx, n, n, true);
        let p2c_all = k_h.matmul(&qr_h.transpose())?; // [N, 2k]
        let p2c = p2c_all.bucket_gather(&p2c_idx, n, n, false);
        per_head.push(content.add(&c2p).add(&p2c).scale(scale));
    }
    Ok(per_head)
}

/// Full pre-norm encoder layer: disentangled attention (masked) with a
/// residual connection, then a GELU feed-forward sublayer with another.
/// `mask` is row-major `[N, N]`; false entries are excluded from the
/// softmax, and a fully-masked row contributes zero attention output, so
/// that row passes through on the residual path.
pub fn da_layer_forward<S: Scalar>(
    h: &Tensor<S>,
    rel: &Tensor<S>,
    layer: &DaLayerTensors<S>,
    heads: usize,
    bucketer: &RelativeBucketer,
    mask: &[bool],
) -> Result<Tensor<S>> {
    let d = h.shape()[1];
    let dh = d / heads;
    let x = h.layer_norm(&layer.ln1_gain, &layer.ln1_bias, LN_EPS);
    let logits = da_attention_logits(&x, rel, layer, heads, bucketer)?;
    let v = x.matmul(&layer.w_v)?;
    let mut head_outs = Vec::with_capacity(heads);
    for (hh, logit) in logits.into_iter().enumerate() {
        let weights = logit.masked_softmax_rows(mask);
        let v_h = v.slice_cols(hh * dh, dh);
        head_outs.push(weights.matmul(&v_h)?);
    }
    let attn = concat(&head_outs, 1);
    let h1 = h.add(&attn);
    let f = h1.layer_norm(&layer.ln2_gain, &layer.ln2_bias, LN_EPS);
    let ff = f
        .matmul(&layer.ff_w1)?
        .add(&layer.ff_b1)
        .gelu()
        .matmul(&layer.ff_w2)?
        .add(&layer.ff_b2);
    Ok(h1.add(&ff))
}

// ── Decoder layers ───────────────────────────────────────────────────

/// Decoder layer arrays: causal self-attention (content + content-to-
/// position), cross-attention (content only), three layer norms, and the
/// feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct DecLayerParams<S: Scalar> {
    pub w_q: Array<S>,
    pub w_k: Array<S>,
    pub w_v: Array<S>,
    pub w_kr: Array<S>,
    pub cross_w_q: Array<S>,
    pub cross_w_k: Array<S>,
    pub cross_w_v: Array<S>,
    pub ln1_gain: Array<S>,
    pub ln1_bias: Array<S>,
    pub ln2_gain: Array<S>,
    pub ln2_bias: Array<S>,
    pub ln3_gain: Array<S>,
    pub ln3_bias: Array<S>,
    pub ff_w1: Array<S>,
    pub ff_b1: Array<S>,
    pub ff_w2: Array<S>,
    pub ff_b2: Array<S>,
}

pub struct DecLayerTensors<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_kr: Tensor<S>,
    pub cross_w_q: Tensor<S>,
    pub cross_w_k: Tensor<S>,
    pub cross_w_v: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub ln3_gain: Tensor<S>,
    pub ln3_bias: Tensor<S>,
    pub ff_w1: Tensor<S>,
    pub ff_b1: Tensor<S>,
    pub ff_w2: Tensor<S>,
    pub ff_b2: Tensor<S>,
}

impl<S: Scalar> DecLayerParams<S> {
    pub fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> DecLayerParams<S> {
        DecLayerParams {
            w_q: normal_init(d, d, rng),
            w_k: normal_init(d, d, rng),
            w_v: normal_init(d, d, rng),
            w_kr: normal_init(d, d, rng),
            cross_w_q: normal_init(d, d, rng),
            cross_w_k: normal_init(d, d, rng),
            cross_w_v: normal_init(d, d, rng),
            ln1_gain: Array::new(vec![d], vec![S::one(); d]),
            ln1_bias: Array::zeros(&[d]),
            ln2_gain: Array::new(vec![d], vec![S::one(); d]),
            ln2_bias: Array::zeros(&[d]),
            ln3_gain: Array::new(vec![d], vec![S::one(); d]),
            ln3_bias: Array::zeros(&[d]),
            ff_w1: normal_init(d, d_ff, rng),
            ff_b1: Array::zeros(&[d_ff]),
            ff_w2: normal_init(d_ff, d, rng),
            ff_b2: Array::zeros(&[d]),
        }
    }

    pub fn leaf(&self, tape: &Tape<S>) -> DecLayerTensors<S> {
        DecLayerTensors {
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            w_kr: tape.leaf(self.w_kr.clone()),
            cross_w_q: tape.leaf(self.cross_w_q.clone()),
            cross_w_k: tape.leaf(self.cross_w_k.clone()),
            cross_w_v: tape.leaf(self.cross_w_v.clone()),
            ln1_gain: tape.leaf(self.ln1_gain.clone()),
            ln1_bias: tape.leaf(self.ln1_bias.clone()),
            ln2_gain: tape.leaf(self.ln2_gain.clone()),
            ln2_bias: tape.leaf(self.ln2_bias.clone()),
            ln3_gain: tape.leaf(self.ln3_gain.clone()),
            ln3_bias: tape.leaf(self.ln3_bias.clone()),
            ff_w1: tape.leaf(self.ff_w1.clone()),
            ff_b1: tape.leaf(self.ff_b1.clone()),
            ff_w2: tape.leaf(self.ff_w2.clone()),
            ff_b2: tape.leaf(self.ff_b2.clone()),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array<S>)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_kr"), &self.w_kr);
        f(format!("{prefix}.cross_w_q"), &self.cross_w_q);
        f(format!("{prefix}.cross_w_k"), &self.cross_w_k);
        f(format!("{prefix}.cross_w_v"), &self.cross_w_v);
        f(format!("{prefix}.ln1_gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &self.ln1_bias);
        f(format!("{prefix}.ln2_gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &self.ln2_bias);
        f(format!("{prefix}.ln3_gain"), &self.ln3_gain);
        f(format!("{prefix}.ln3_bias"), &self.ln3_bias);
        f(format!("{prefix}.ff_w1"), &self.ff_w1);
        f(format!("{prefix}.ff_b1"), &self.ff_b1);
        f(format!("{prefix}.ff_w2"), &self.ff_w2);
        f(format!("{prefix}.ff_b2"), &self.ff_b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array<S>)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_kr"), &mut self.w_kr);
        f(format!("{prefix}.cross_w_q"), &mut self.cross_w_q);
        f(format!("{prefix}.cross_w_k"), &mut self.cross_w_k);
        f(format!("{prefix}.cross_w_v"), &mut self.cross_w_v);
        f(format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        f(format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
        f(format!("{prefix}.ln3_gain"), &mut self.ln3_gain);
        f(format!("{prefix}.ln3_bias"), &mut self.ln3_bias);
        f(format!("{prefix}.ff_w1"), &mut self.ff_w1);
        f(format!("{prefix}.ff_b1"), &mut self.ff_b1);
        f(format!("{prefix}.ff_w2"), &mut self.ff_w2);
        f(format!("{prefix}.ff_b2"), &mut self.ff_b2);
    }
}

/// Pre-norm decoder layer: causal self-attention with relative positions,
/// cross-attention over the encoder memory, then feed-forward. `mem_mask`
/// marks valid memory positions (false = padding).
pub fn dec_layer_forward<S: Scalar>(
    h: &Tensor<S>,
    memory: &Tensor<S>,
    rel: &Tensor<S>,
    layer: &DecLayerTensors<S>,
    heads: usize,
    bucketer: &RelativeBucketer,
    mem_mask: &[bool],
) -> Result<Tensor<S>> {
    let t = h.shape()[0];
    let d = h.shape()[1];
    let dh = d / heads;
    let n = memory.shape()[0];
    assert_eq!(mem_mask.len(), n, "memory mask length mismatch");

    // Causal self-attention: score = (Q.K + Q.Kr[bucket]) / sqrt(2*dh).
    let self_scale = 1.0 / (2.0 * dh as f64).sqrt();
    let x = h.layer_norm(&layer.ln1_gain, &layer.ln1_bias, LN_EPS);
    let q = x.matmul(&layer.w_q)?;
    let k = x.matmul(&layer.w_k)?;
    let v = x.matmul(&layer.w_v)?;
    let kr = rel.matmul(&layer.w_kr)?;
    let c2p_idx = bucketer.c2p_matrix(t, t);
    let mut causal = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            causal[i * t + j] = true;
        }
    }
    let mut self_heads = Vec::with_capacity(heads);
    for hh in 0..heads {
        let q_h = q.slice_cols(hh * dh, dh);
        let k_h = k.slice_cols(hh * dh, dh);
        let kr_h = kr.slice_cols(hh * dh, dh);
        let content = q_h.matmul(&k_h.transpose())?;
        let c2p = q_h
            .matmul(&kr_h.transpose())?
            .bucket_gather(&c2p_idx, t, t, true);
        let weights = content
            .add(&c2p)
            .scale(self_scale)
            .masked_softmax_rows(&causal);
        self_heads.push(weights.matmul(&v.slice_cols(hh * dh, dh))?);
    }
    let h1 = h.add(&concat(&self_heads, 1));

    // Cross-attention: content-only, scaled by sqrt(dh).
    let cross_scale = 1.0 / (dh as f64).sqrt();
    let c = h1.layer_norm(&layer.ln2_gain, &layer.ln2_bias, LN_EPS);
    let cq = c.matmul(&layer.cross_w_q)?;
    let ck = memory.matmul(&layer.cross_w_k)?;
    let cv = memory.matmul(&layer.cross_w_v)?;
    let mut cross_mask = vec![false; t * n];
    for i in 0..t {
        for j in 0..n {
            cross_mask[i * n + j] = mem_mask[j];
        }
    }
    let mut cross_heads = Vec::with_capacity(heads);
    for hh in 0..heads {
        let q_h = cq.slice_cols(hh * dh, dh);
        let k_h = ck.slice_cols(hh * dh, dh);
        let weights = q_h
            .matmul(&k_h.transpose())?
            .scale(cross_scale)
            .masked_softmax_rows(&cross_mask);
        cross_heads.push(weights.matmul(&cv.slice_cols(hh * dh, dh))?);
    }
    let h2 = h1.add(&concat(&cross_heads, 1));

    let f = h2.layer_norm(&layer.ln3_gain, &layer.ln3_bias, LN_EPS);
    let ff = f
        .matmul(&layer.ff_w1)?
        .add(&layer.ff_b1)
        .gelu()
        .matmul(&layer.ff_w2)?
        .add(&layer.ff_b2);
    Ok(h2.add(&ff))
}
