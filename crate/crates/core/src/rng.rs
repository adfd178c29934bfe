//! Seed fan-out. Every consumer of randomness draws from its own ChaCha stream
//! keyed by `(domain, index)`, so adding clients or rounds never perturbs the
//! streams used elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Domain {
    Data = 1,
    Split = 2,
    Corruption = 3,
    Init = 4,
    Shuffle = 5,
    Test = 6,
}

pub fn stream(master: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((domain as u64) << 48) ^ index);
    rng
}

/// Stream for something indexed by two counters, e.g. (client, round).
pub fn stream2(master: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    stream(master, domain, (a << 24) ^ b)
}
