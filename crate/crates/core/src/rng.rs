//! Hierarchical, order-independent random streams.
//!
//! A stream is a 64-bit key. Children are derived by mixing a tag into the
//! key, so the randomness consumed by one task, trajectory or evaluation pair
//! never depends on how many draws its siblings made or on which worker ran
//! them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix64(seed),
        }
    }

    pub fn child(&self, tag: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// Child tags with a fixed meaning.
pub mod tags {
    pub const ADAPT_DATA: u64 = 1;
    pub const OUTER_DATA: u64 = 2;
    pub const EVAL_PAIRS: u64 = 3;
    pub const TASKS: u64 = 4;
    pub const ITERATIONS: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SWEEP: u64 = 7;
    pub const PER_TASK: u64 = 9;
}
