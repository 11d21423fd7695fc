//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline is a pure function of the master
//! seed plus structural counters (epoch, iteration, sample slot), so runs
//! replay bit-exactly and per-sample work could be sharded without changing
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates consecutive counter values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and up to three counters.
pub fn derive_seed(master: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut s = mix(master ^ 0x5851f42d4c957f2d);
    s = mix(s ^ a);
    s = mix(s ^ b);
    s = mix(s ^ c);
    s
}

/// Seeded generator for a derived stream.
pub fn rng_for(master: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, a, b, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let s1 = derive_seed(7, 1, 2, 3);
        let s2 = derive_seed(7, 1, 2, 3);
        assert_eq!(s1, s2);
        assert_ne!(derive_seed(7, 1, 2, 3), derive_seed(7, 1, 2, 4));
        assert_ne!(derive_seed(7, 0, 0, 0), derive_seed(8, 0, 0, 0));
    }
}
