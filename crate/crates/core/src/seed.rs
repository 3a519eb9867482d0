//! Seed derivation.
//!
//! Every random stream in an experiment is keyed by `(base seed, stream name,
//! indices)`, e.g. `("local_train", [round, client])`. Streams never share
//! state, so the order in which clients run cannot change any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed, a stream name and a path of indices.
pub fn derive_seed(base: u64, stream: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the stream name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut state = splitmix64(base ^ splitmix64(h));
    for &i in indices {
        state = splitmix64(state ^ splitmix64(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    state
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
