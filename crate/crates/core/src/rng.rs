//! Counter-based random stream derivation.
//!
//! Every random stream is addressed by a path of integers (master seed,
//! replication, cycle, run, purpose). The path is folded through a SplitMix64
//! finalizer, so the stream for a given address never depends on the order in
//! which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random generator used throughout the crate.
pub type Stream = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        StreamKey(mix(master_seed))
    }

    /// Derives the key of a sub-stream.
    pub fn child(self, index: u64) -> Self {
        StreamKey(mix(self.0 ^ mix(index.wrapping_add(0x2545_F491_4F6C_DD1D))))
    }

    pub fn path(self, indices: &[u64]) -> Self {
        indices.iter().fold(self, |k, &i| k.child(i))
    }

    pub fn rng(self) -> Stream {
        Stream::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}
