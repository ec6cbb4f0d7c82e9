//! Seed derivation so every stochastic stage owns an independent,
//! reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed, a stage label and integer keys into a single seed.
pub fn derive_seed(seed: u64, label: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    h
}

pub fn rng_for(seed: u64, label: &str, keys: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, label, keys))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
