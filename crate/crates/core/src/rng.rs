//! Named random sub-streams derived from a single run seed.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, purpose, agent, round, slot)`. Streams are independent of the
//! order in which they are requested, so agents can be processed in any
//! order (or in parallel) without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Random purposes used across the crate. The string tag is what gets hashed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Blobs,
    TrainTestSplit,
    Partition,
    Validation,
    Malicious,
    DataNoise,
    Batch,
    Poison,
    Shapley,
    ValidationSubsample,
    Bench,
}

impl Purpose {
    pub fn tag(self) -> &'static str {
        match self {
            Purpose::Init => "init",
            Purpose::Blobs => "blobs",
            Purpose::TrainTestSplit => "train_test_split",
            Purpose::Partition => "partition",
            Purpose::Validation => "validation",
            Purpose::Malicious => "malicious",
            Purpose::DataNoise => "data_noise",
            Purpose::Batch => "batch",
            Purpose::Poison => "poison",
            Purpose::Shapley => "shapley",
            Purpose::ValidationSubsample => "validation_subsample",
            Purpose::Bench => "bench",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Factory for the sub-streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self, purpose: Purpose, agent: u64, round: u64, slot: u64) -> u64 {
        let mut h = splitmix64(self.seed);
        for part in [fnv1a(purpose.tag()), agent, round, slot] {
            h = splitmix64(h ^ part);
        }
        h
    }

    pub fn stream(&self, purpose: Purpose, agent: u64, round: u64, slot: u64) -> StreamRng {
        let key = self.key(purpose, agent, round, slot);
        log::trace!(
            "stream {} agent={} round={} slot={} key={:016x}",
            purpose.tag(),
            agent,
            round,
            slot,
            key
        );
        ChaCha8Rng::seed_from_u64(key)
    }

    /// Stream that only depends on the seed and the purpose.
    pub fn global(&self, purpose: Purpose) -> StreamRng {
        self.stream(purpose, u64::MAX, u64::MAX, 0)
    }
}
