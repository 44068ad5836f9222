//! Seed derivation for reproducible, independently addressable random
//! streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from a root seed, a stream label, and an index. Deriving streams
//! by (label, index) instead of sharing one sequential generator keeps
//! results independent of evaluation order: scenario 17 gets the same
//! obstacles whether it is sampled first or last, and a training run can be
//! resumed at step `t` without replaying steps `0..t`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the derivation scheme, recorded in dataset headers so files are
/// self-describing.
pub const PRNG_NAME: &str = "chacha8/splitmix64-v1";

/// splitmix64 finalizer; the standard 64-bit mixer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, stable across platforms.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a ChaCha8 stream for `(seed, label, index)`.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ label_hash(label));
    state = splitmix64(state ^ index);
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_inputs_same_stream() {
        let mut a = derive_rng(7, "scenario", 3);
        let mut b = derive_rng(7, "scenario", 3);
        let xs: Vec<u64> = (0..16).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.gen()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = derive_rng(7, "scenario", 3);
        let mut b = derive_rng(7, "scenario", 4);
        let mut c = derive_rng(7, "postures", 3);
        let x: u64 = a.gen();
        let y: u64 = b.gen();
        let z: u64 = c.gen();
        assert_ne!(x, y);
        assert_ne!(x, z);
    }
}
