//! Deterministic random numbers.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), a
//! counter-based generator whose output stream is fixed by its published
//! algorithm: a 64-bit seed expands to the 256-bit key via `seed_from_u64`,
//! and independent substreams use ChaCha's 64-bit stream id. Streams are
//! identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` derived from `seed`, e.g. one per slice.
pub fn substream(seed: u64, index: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
