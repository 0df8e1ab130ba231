//! Seed derivation for independent random streams.
//!
//! Every stochastic component (init, shuffling, generation, SOM) draws from its
//! own stream keyed by `(seed, component)`, so a cell can be reproduced without
//! replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a over the label, folded with the seed through a splitmix64 finalizer.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, component: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, component))
}
