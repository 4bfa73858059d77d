//! Seed derivation for independent, order-insensitive random streams.
//!
//! Every randomized operation in the crate takes an explicit seed and derives
//! its stream with [`derive_seed`], so run r of an evaluation (or episode e of
//! an epoch) produces the same draws no matter which order, or on how many
//! threads, the runs execute.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche behavior for cheap seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a stream label and an index into a new seed.
///
/// The label keeps unrelated streams (training episodes, validation episodes,
/// evaluation support draws, ...) decorrelated even when their indices
/// coincide.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// Deterministic, portable RNG seeded from a derived seed.
pub fn rng_from(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}
