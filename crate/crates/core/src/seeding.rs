//! Deterministic RNG streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, indices…)`.
pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for b in purpose.bytes() {
        h = splitmix(h ^ b as u64);
    }
    for &i in indices {
        h = splitmix(h ^ i);
    }
    ChaCha8Rng::seed_from_u64(h)
}
