//! Fusion-in-encoder: hierarchical long-sequence encoding.
//!
//! The first `m` encoder layers attend only within fixed-size chunks (the
//! "local" layers); the remaining `n` layers attend over the full sequence
//! (the "global" or fusion layers). Chunking is a scheduling policy over the
//! same layer parameters — it introduces none of its own — so a sequence
//! that fits inside one chunk encodes identically to the vanilla path.
//! Attention-score work drops from L*N^2 to m*sum(c_i^2) + n*N^2 where the
//! c_i are chunk lengths (m*N*l when l divides N).

use std::cell::Cell;
use std::rc::Rc;

use crate::attention::{da_layer_forward, DaLayerTensors, RelativeBucketer};
use crate::error::{CoreError, Result};
use crate::tensor::{concat, Scalar, Tensor};

/// Chunked-encoding schedule: how many layers run locally, how many fuse
/// globally, and the chunk length.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FiEConfig {
    pub local_layers: usize,
    pub global_layers: usize,
    pub chunk: usize,
}

impl FiEConfig {
    /// Checks the schedule against the encoder depth.
    pub fn validate(&self, total_layers: usize) -> Result<()> {
        if self.local_layers + self.global_layers != total_layers {
            return Err(CoreError::Config(format!(
                "local ({}) + global ({}) layers must equal encoder depth {}",
                self.local_layers, self.global_layers, total_layers
            )));
        }
        if self.chunk == 0 {
            return Err(CoreError::Config("chunk size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shared counter of attention-score matrix elements, incremented once per
/// score matrix materialized during encoding.
#[derive(Debug, Clone, Default)]
pub struct ScoreCounter {
    count: Rc<Cell<u64>>,
}

impl ScoreCounter {
    pub fn new() -> ScoreCounter {
        ScoreCounter::default()
    }
    pub fn add(&self, n: u64) {
        self.count.set(self.count.get() + n);
    }
    pub fn get(&self) -> u64 {
        self.count.get()
    }
    pub fn reset(&self) {
        self.count.set(0);
    }
}

/// `(start, len)` spans covering `n` rows in chunks of `l`; only the last
/// chunk may be short.
pub fn chunk_ranges(n: usize, l: usize) -> Vec<(usize, usize)> {
    assert!(l >= 1, "chunk size must be at least 1");
    let mut ranges = Vec::with_capacity(n.div_ceil(l));
    let mut start = 0;
    while start < n {
        let len = l.min(n - start);
        ranges.push((start, len));
        start += len;
    }
    ranges
}

/// Splits hidden states into row chunks whose concatenation reproduces the
/// input exactly.
pub fn split_into_chunks<S: Scalar>(h: &Tensor<S>, l: usize) -> Vec<Tensor<S>> {
    chunk_ranges(h.shape()[0], l)
        .into_iter()
        .map(|(start, len)| h.slice_rows(start, len))
        .collect()
}

/// Attention-score element count for the chunked schedule: local layers pay
/// the sum of squared chunk lengths, global layers pay N^2.
pub fn fie_cost(n_tokens: usize, total_layers: usize, m: usize, n: usize, l: usize) -> u64 {
    assert_eq!(m + n, total_layers, "m + n must equal the layer count");
    let local_per_layer: u64 = chunk_ranges(n_tokens, l)
        .iter()
        .map(|&(_, len)| (len * len) as u64)
        .sum();
    m as u64 * local_per_layer + n as u64 * (n_tokens * n_tokens) as u64
}

fn key_block_mask(keys: &[bool]) -> Vec<bool> {
    let n = keys.len();
    let mut mask = Vec::with_capacity(n * n);
    for _ in 0..n {
        mask.extend_from_slice(keys);
    }
    mask
}

/// Runs hidden states through an encoder stack. With a chunk schedule, the
/// first `local_layers` layers see each chunk independently; the rest see
/// the concatenated sequence. Without one, every layer is global. `key_mask`
/// marks real (non-padding) tokens; the optional counter tallies score
/// elements for cost verification.
pub fn encode_hidden<S: Scalar>(
    h0: Tensor<S>,
    layers: &[DaLayerTensors<S>],
    rel: &Tensor<S>,
    heads: usize,
    bucketer: &RelativeBucketer,
    key_mask: &[bool],
    fie: Option<&FiEConfig>,
    counter: Option<&ScoreCounter>,
) -> Result<Tensor<S>> {
    let n = h0.shape()[0];
    assert_eq!(key_mask.len(), n, "key mask length mismatch");
    let (local_layers, chunk) = match fie {
        Some(cfg) => {
            cfg.validate(layers.len())?;
            (cfg.local_layers, cfg.chunk)
        }
        None => (0, 0),
    };
    let mut h = h0;
    for (li, layer) in layers.iter().enumerate() {
        if li < local_layers {
            let mut outs = Vec::new();
            for (start, len) in chunk_ranges(n, chunk) {
                let piece = h.slice_rows(start, len);
                let mask = key_block_mask(&key_mask[start..start + len]);
                if let Some(c) = counter {
                    c.add((len * len) as u64);
                }
                outs.push(da_layer_forward(
                    &piece, rel, layer, heads, bucketer, &mask,
                )?);
            }
            h = concat(&outs, 0);
        } else {
            let mask = key_block_mask(key_mask);
            if let Some(c) = counter {
                c.add((n * n) as u64);
            }
            h = da_layer_forward(&h, rel, layer, heads, bucketer, &mask)?;
        }
    }
    Ok(h)
}
