//! Labeled seed derivation. Every random stream in the crate is a ChaCha
//! generator keyed by a sub-seed hashed from the run seed and a fixed label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash `seed` together with a label into a new 64-bit seed (FNV-1a over the
/// label bytes, then a splitmix finalizer).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ splitmix(seed);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

/// Derive a seed from a label plus a list of integer coordinates
/// (epoch, position, ...).
pub fn derive_indexed(seed: u64, label: &str, idx: &[u64]) -> u64 {
    idx.iter()
        .fold(derive_seed(seed, label), |acc, &i| splitmix(acc ^ splitmix(i)))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

pub fn rng_indexed(seed: u64, label: &str, idx: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(seed, label, idx))
}
