//! Seed derivation for reproducible, resumable runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent generator for `(seed, stream, index)`.
///
/// Training loops draw one generator per step so that a run resumed from a
/// checkpoint at step `s` consumes exactly the randomness it would have
/// consumed without the interruption.
pub fn derive(seed: u64, stream: u64, index: u64) -> Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ stream) ^ index);
    Rng::seed_from_u64(s)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
