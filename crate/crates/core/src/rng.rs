//! Seed derivation and RNG construction.
//!
//! Every stochastic choice in the pipeline derives its own stream from a base
//! seed plus a fixed tag path, so adding workers or reordering steps never
//! perturbs unrelated draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags for the independent RNG streams.
pub mod stream {
    pub const SYNTH_GEOMETRY: u64 = 0x01;
    pub const SYNTH_FEATURES: u64 = 0x02;
    pub const SYNTH_CLASS_MEANS: u64 = 0x03;
    pub const REGION_SAMPLE: u64 = 0x10;
    pub const NEGATIVES: u64 = 0x11;
    pub const EPOCH_SHUFFLE: u64 = 0x12;
    pub const INIT_ENCODER: u64 = 0x20;
    pub const INIT_CLASSIFIER: u64 = 0x21;
    pub const KMEANS: u64 = 0x30;
    pub const CHECK: u64 = 0x40;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a tag path into an independent sub-seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &p in parts {
        s = splitmix64(s ^ p.wrapping_mul(0xff51afd7ed558ccd));
    }
    s
}

/// ChaCha keeps the draws identical across platforms and rand releases.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
