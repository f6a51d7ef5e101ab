//! Deterministic RNG streams.
//!
//! One master seed drives everything. Each example draw gets its own
//! stream derived as `hash(seed, index)`, so corruption plans and
//! instruction choices depend only on the example's draw index, never on
//! batch layout or worker scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit finalizer from splitmix64; decorrelates nearby (seed, index) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stream for the `index`-th example draw under `seed`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ mix(index.wrapping_add(0x51ed_2701))))
}

/// Stream for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ 0x7a17))
}

/// Stream for dropout masks at a given training step.
pub fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ 0xd409) ^ mix(step)))
}
