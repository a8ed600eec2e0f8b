//! Seeded random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, domain, index)`, so results never depend on call order or on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const DROPOUT: u64 = 1;
pub(crate) const NOISE: u64 = 2;
pub(crate) const CONCRETE: u64 = 3;
pub(crate) const CA_MASK: u64 = 4;
pub(crate) const STRATEGY: u64 = 5;
pub(crate) const SCENE: u64 = 6;
pub(crate) const RIG: u64 = 7;
pub(crate) const INIT: u64 = 8;

pub(crate) fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Independent keep flags, each true with probability `1 - drop`.
pub(crate) fn keep_flags(n: usize, drop: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    use rand::Rng;
    (0..n).map(|_| rng.random::<f64>() >= drop).collect()
}
