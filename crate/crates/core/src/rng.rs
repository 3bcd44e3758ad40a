//! Seed-derived random substreams.
//!
//! Every stage (data generation, training, adaptation) draws from its own
//! ChaCha stream keyed by a stage name, so stages can be rerun independently
//! without perturbing each other's randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable FNV-1a hash of the stage name; used as the ChaCha stream id.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Returns the random stream for `(seed, stage)`.
///
/// The same pair always yields the same stream; different stage names yield
/// independent streams of the same seed.
pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(stage.as_bytes()));
    rng
}
