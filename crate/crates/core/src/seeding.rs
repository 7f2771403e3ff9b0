//! Deterministic seed derivation for parallel workers.
//!
//! Every unit of stochastic work (a context, an impression, a replicate) gets
//! its own generator whose seed is a hash of the run seed and a path of
//! integer labels. Results therefore do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of labels into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// Generator for the given base seed and label path.
pub fn rng_for(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, path))
}

/// Stream labels used across the crate so that distinct purposes never share
/// a generator.
pub mod stream {
    pub const TRAIN_CONTEXTS: u64 = 1;
    pub const TEST_CONTEXTS: u64 = 2;
    pub const PHASE_ONE: u64 = 3;
    pub const PHASE_TWO: u64 = 4;
    pub const EVALUATION: u64 = 5;
    pub const VERIFY: u64 = 6;
    pub const EQUILIBRIUM: u64 = 7;
    pub const SIMULATE: u64 = 8;
    pub const BID_PROBE: u64 = 9;
}
