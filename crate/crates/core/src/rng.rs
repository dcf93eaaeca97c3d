//! Seeded random streams.
//!
//! Every random draw in the crate goes through a ChaCha8 generator derived
//! from a user seed and a fixed stream tag, so separate consumers (weight
//! init, data generation, batch order, perturbations) never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const LABELS: u64 = 5;
    pub const PERTURB: u64 = 6;
    pub const PROBE: u64 = 7;
}

/// A generator for `(seed, stream)`.
pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
