//! Counter-based random streams.
//!
//! A stream is identified by `(seed, stream_id)`; the sequence it produces does
//! not depend on which thread draws it or in what order streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        g.set_stream(self.stream_id);
        g
    }

    /// Derives a stream keyed by a string (e.g. an image id), so per-item
    /// randomness does not depend on item order.
    pub fn keyed(seed: u64, key: &str) -> Self {
        Self::new(seed, fnv1a64(key.as_bytes()))
    }
}

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
