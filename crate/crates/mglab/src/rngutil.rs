//! Seed plumbing. All randomness in the crate flows from a single 64-bit seed
//! through named ChaCha substreams, so paired experiments can share noise and
//! every run is exactly reproducible.

use crate::vec2::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Named substream ids. Sampler chains get `SAMPLER_CHAIN + chain_index`;
/// periodic in-training evaluations get `TRAIN_EVAL + step`.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const DROP: u64 = 3;
    pub const SAMPLER_CHAIN: u64 = 1 << 32;
    pub const TRAIN_EVAL: u64 = 2 << 32;
    pub const GROUND_TRUTH: u64 = 3 << 32;
}

/// Deterministic RNG for a (seed, substream) pair.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draw a standard 2D Gaussian vector.
pub fn gauss2<R: Rng>(rng: &mut R) -> Vec2 {
    let x = standard_normal(rng);
    let y = standard_normal(rng);
    Vec2::new(x, y)
}
