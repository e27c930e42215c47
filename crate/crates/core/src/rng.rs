//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by `(seed, stream)`, so any trajectory or batch can be replayed from
//! its identifiers alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a list of words into one 64-bit stream id (splitmix64 finalizer).
pub fn mix(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

/// Stable 64-bit FNV-1a hash of a string, for deriving seeds from names.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_replayable_and_distinct() {
        let a: Vec<u32> = (0..4).map(|_| stream_rng(5, 1).gen()).collect();
        let mut r1 = stream_rng(5, 1);
        let mut r2 = stream_rng(5, 2);
        let x: u64 = r1.gen();
        let y: u64 = r2.gen();
        assert_ne!(x, y);
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
    }
}
