//! Seeded generators.
//!
//! Every experiment derives independent sub-streams from one user seed, so
//! results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for `(seed, stream)`. Distinct streams never overlap.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs up to three small indices into one stream id.
pub fn stream_id(a: u64, b: u64, c: u64) -> u64 {
    (a << 42) ^ (b << 21) ^ c
}
