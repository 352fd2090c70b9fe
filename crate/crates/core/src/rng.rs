//! Counter-keyed random streams. Every draw is addressed by a tuple such as
//! `(seed, stream, round, epoch, image, k)`, so the order in which work is
//! scheduled never changes what gets sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Distinguishes the independent uses of a single seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    CondNoise = 2,
    PseudoNoise = 3,
    Shuffle = 4,
    Scene = 5,
    Prototype = 6,
    Verify = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, key: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &k in key {
        h = splitmix(h ^ k);
    }
    h
}

pub fn keyed(seed: u64, stream: Stream, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, key))
}
