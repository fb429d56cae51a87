//! Stable seed derivation.
//!
//! Every random stream in a run is keyed by a 64-bit value derived from the
//! run's seed base and a path of indices (stream tag, batch index, sample
//! index). The mixer is the SplitMix64 finalizer, so derived seeds are
//! identical across platforms and process restarts, and never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep the estimator's independent draws apart.
pub mod stream {
    pub const REFERENCE: u64 = 0x5245_4645;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const TYPICALITY: u64 = 0x5459_5043;
    pub const GENERICIZE: u64 = 0x4745_4e52;
    pub const ANCHOR: u64 = 0x414e_4348;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a sequence of words into one seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(base.wrapping_add(GOLDEN)), |acc, &w| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(w.wrapping_add(GOLDEN)))
    })
}

/// Seed handed to a backend for one batch.
pub fn batch_seed(seed_base: u64, stream: u64, batch: usize) -> u64 {
    derive(seed_base, &[stream, batch as u64])
}

/// Seed of one sample inside a batch. Backends call this so that the sample
/// seed is a hash of (seed base, stream, batch index, sample index).
pub fn sample_seed(batch_seed: u64, sample: usize) -> u64 {
    derive(batch_seed, &[sample as u64])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
