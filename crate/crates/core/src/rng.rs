//! Seed expansion. Every random stream in a run derives from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer applied to `seed + stream·golden`.
///
/// Distinct `stream` values yield statistically independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named sub-streams of a run's root seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const PARTITION_INIT: u64 = 2;
    pub const PARTITION_SHUFFLE: u64 = 3;
    pub const MOE_INIT: u64 = 4;
    pub const MOE_SHUFFLE: u64 = 5;
    pub const TEST_DATA: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
