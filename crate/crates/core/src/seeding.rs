//! Derivation of independent random streams from one master seed.
//!
//! A stream is identified by a path of integers (purpose tag, epoch, index, ...).
//! Its seed is the master seed folded with each path element through the
//! SplitMix64 finalizer, so a stream never depends on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purpose tags.
pub mod tag {
    pub const POLICY_INIT: u64 = 1;
    pub const ENV_CHOICE: u64 = 2;
    pub const ROLLOUT: u64 = 3;
    pub const EVALUATION: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const TASKS: u64 = 6;
    pub const THEORY: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream at `path` under `master`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc.rotate_left(29) ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
