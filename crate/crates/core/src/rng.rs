//! Seeded random number generation.
//!
//! Every random draw in the crate goes through a ChaCha8 stream cipher
//! generator (a counter-based design), so runs are reproducible from a
//! single `u64` seed on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose derived from a base seed.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
