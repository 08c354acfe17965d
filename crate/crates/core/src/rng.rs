//! Counter-based random streams.
//!
//! Every random draw in a run is addressed by a tuple of 64-bit words (run
//! seed, level tag, iteration counters, ...). The tuple is hashed with
//! SplitMix64 into a ChaCha key, so a draw depends only on its address and
//! never on how many other draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// A ChaCha stream keyed by `words`.
pub fn keyed_rng(words: &[u64]) -> ChaCha8Rng {
    let base = mix(words);
    let mut seed = [0u8; 32];
    for (lane, chunk) in seed.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(base ^ (lane as u64 + 1)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Plain seeded stream for one-off draws (problem instances, initial points).
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    keyed_rng(&[seed])
}
