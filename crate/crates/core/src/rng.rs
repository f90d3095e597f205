//! Counter-addressed random streams.
//!
//! A stream is identified by a master seed and a 64-bit index. The pair
//! selects a ChaCha key and stream id, so the drawn sequence depends on
//! nothing else: not on thread scheduling and not on how many other
//! streams were consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type produced by [`RngStream::rng`].
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub index: u64,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, index: 0 }
    }

    /// Child stream addressed by `i` below this one. Children of distinct
    /// parents or distinct `i` land on unrelated stream ids.
    #[inline]
    pub fn substream(&self, i: u64) -> Self {
        Self {
            seed: self.seed,
            index: splitmix64(self.index ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    /// Fresh generator positioned at the start of this stream.
    #[inline]
    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        rng
    }
}
