//! Seeded random streams. Every consumer of randomness derives its generator
//! from an explicit `(seed, stream)` pair so results never depend on call
//! order across independent consumers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Generator for a given seed and stream id.
pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Stream id for a `(epoch, item)` pair.
pub fn epoch_item_stream(epoch: usize, item: usize) -> u64 {
    ((epoch as u64) << 32) | (item as u64 & 0xffff_ffff)
}

pub fn standard_normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
