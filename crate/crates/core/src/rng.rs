//! Seed derivation. Every stochastic step draws from its own ChaCha stream
//! keyed by (run seed, purpose tag, counters), so reordering or skipping one
//! consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a string tag and any number of counters.
pub fn derive(seed: u64, tag: &str, counters: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    for &c in counters {
        h = splitmix(h ^ c);
    }
    h
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derived(seed: u64, tag: &str, counters: &[u64]) -> Rng {
    rng(derive(seed, tag, counters))
}
