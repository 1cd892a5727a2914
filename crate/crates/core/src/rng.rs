//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] keyed by
//! `(seed, stream, counter)`, so results never depend on call order across
//! independent consumers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams derived from one top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Corpus = 2,
    Batch = 3,
    Mask = 4,
    Noise = 5,
    Decode = 6,
    Attribution = 7,
    Eval = 8,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with a stream tag and a counter into a new 64-bit key.
pub fn derive(seed: u64, stream: Stream, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ (stream as u64)) ^ counter)
}

/// Generator for `(seed, stream, counter)`.
pub fn keyed(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, counter))
}

/// Generator for `(seed, stream, step, lane)`.
pub fn lane(seed: u64, stream: Stream, step: u64, lane: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(derive(seed, stream, step) ^ lane.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}
