//! Seeded random streams.
//!
//! Everything random in the crate is drawn from ChaCha8 streams so that results
//! are reproducible across platforms and crate versions. Independent streams are
//! derived from a master seed and a stream index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `index` of the family rooted at `seed`.
pub fn stream(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream for a (purpose, index) pair, so unrelated consumers of the same
/// master seed never share randomness.
pub fn substream(seed: u64, purpose: u64, index: u64) -> SimRng {
    stream(splitmix(seed ^ splitmix(purpose)), index)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
