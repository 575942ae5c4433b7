//! Counter-based random streams keyed by `(seed, iteration)`.
//!
//! Every search iteration draws from its own ChaCha8 stream, selected by the
//! iteration index. The stream an iteration sees therefore does not depend on
//! which thread runs it or in what order iterations complete, which is what
//! makes the pipeline engine replayable against the sequential one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random generator used by the search operations.
pub type SearchRng = ChaCha8Rng;

/// The stream for one search iteration.
pub fn iteration_rng(seed: u64, iteration: u64) -> SearchRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// SplitMix64 finalizer. Used to derive child seeds and for hashing.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a parent seed and an index.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Map the top 53 bits of `x` onto `[0, 1)`. Every output is `k / 2^53`.
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
