//! Deterministic RNG streams.
//!
//! Every random draw in the toolkit comes from a ChaCha stream whose seed is
//! derived by pure mixing from (base seed, stream label, item ids). Derived
//! streams are independent of iteration order and thread schedule, so
//! parallel generation produces the same bytes as sequential generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream label and item words into a new seed.
pub fn derive_seed(base: u64, label: &str, words: &[u64]) -> u64 {
    let mut acc = splitmix(base);
    for &b in label.as_bytes() {
        acc = splitmix(acc ^ u64::from(b));
    }
    for &w in words {
        acc = splitmix(acc ^ w);
    }
    acc
}

/// A seeded ChaCha stream for the given (base, label, words) triple.
pub fn stream(base: u64, label: &str, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, words))
}

/// Deterministic 64-bit fingerprint of a 2D position, used to derive
/// per-receiver streams from coordinates alone.
pub fn position_words(xy: [f64; 2]) -> [u64; 2] {
    [xy[0].to_bits(), xy[1].to_bits()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn distinct_labels_give_distinct_streams() {
        let a = stream(7, "ta", &[3]).next_u64();
        let b = stream(7, "noise", &[3]).next_u64();
        let c = stream(7, "ta", &[4]).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derivation_is_reproducible() {
        let s1 = derive_seed(42, "labels", &[1, 2, 3]);
        let s2 = derive_seed(42, "labels", &[1, 2, 3]);
        assert_eq!(s1, s2);
    }
}
