//! Seeded randomness. Every random draw in the crate goes through a
//! ChaCha8 stream seeded from a 64-bit value, so results depend only on the
//! seed and never on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FNV-1a over the key bytes mixed with `seed`.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in key.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent stream for a named sub-task, e.g. one image's augmentation.
pub fn derived(seed: u64, key: &str) -> DetRng {
    seeded(derive_seed(seed, key))
}
