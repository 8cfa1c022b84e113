//! Reproducible stream derivation.
//!
//! Every sampling site derives its own generator from `(master seed, stream
//! tag, index)`, so results do not depend on worker count or scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates structured seed inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives independent, reproducible random streams from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeder {
    master: u64,
}

impl Seeder {
    pub fn new(master: u64) -> Self {
        Seeder { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// A stream identified by a tag and an index (worker, episode, ...).
    pub fn stream(&self, tag: u64, index: u64) -> ChaCha8Rng {
        let s = mix(self.master ^ mix(tag) ^ mix(index.wrapping_mul(0xa076_1d64_78bd_642f)));
        ChaCha8Rng::seed_from_u64(s)
    }

    /// A derived seeder for a sub-component (e.g. one cover iteration).
    pub fn child(&self, tag: u64) -> Seeder {
        Seeder {
            master: mix(self.master ^ mix(tag)),
        }
    }
}

/// Stream tags used across the crate, so call sites cannot collide.
pub mod tags {
    pub const ENV_CONSTRUCT: u64 = 0x01;
    pub const EPISODE: u64 = 0x02;
    pub const CB_TRAIN: u64 = 0x03;
    pub const REG_TRAIN: u64 = 0x04;
    pub const DATASET: u64 = 0x05;
    pub const EVAL: u64 = 0x06;
    pub const INIT: u64 = 0x07;
}
