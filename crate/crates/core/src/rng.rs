//! Seed plumbing. Every random draw in the crate comes from a ChaCha stream
//! whose seed is derived from the run seed plus a purpose tag and counters, so
//! results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a base seed, a purpose tag and a list of counters.
pub fn derive_seed(base: u64, tag: &str, counters: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ tag_hash(tag));
    for &c in counters {
        s = splitmix64(s ^ c);
    }
    s
}

pub fn rng_for(base: u64, tag: &str, counters: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tag, counters))
}
