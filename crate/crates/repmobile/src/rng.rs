//! Deterministic keyed RNG streams.
//!
//! Every random draw in the toolkit comes from a stream keyed by a master
//! seed plus a list of tags (epoch, sample id, ...). Streams are independent
//! of each other and of iteration order, so adding or removing a consumer
//! never shifts anybody else's randomness. This is what makes cached
//! augmentation descriptors replayable and whole runs bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit stream key from a master seed and tag list.
pub fn stream_key(master: u64, tags: &[u64]) -> u64 {
    let mut h = mix(master ^ 0x5265_704d_6f62_696c); // "RepMobil"
    for &t in tags {
        h = mix(h ^ t);
    }
    h
}

/// RNG for the stream identified by `(master, tags)`.
pub fn stream_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(master, tags))
}

/// Stream key from a string label (used for per-tensor init streams).
pub fn label_key(label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
