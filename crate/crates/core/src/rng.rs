//! Counter-based seed derivation.
//!
//! Every random stream in the lab is addressed by a base seed plus a path of
//! integer labels (purpose tag, step index, trial index, ...). Streams never
//! share state, so a trajectory can be split at any step and resumed with the
//! same noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags for derived streams.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const DATA: u64 = 0x2;
    pub const START_NOISE: u64 = 0x3;
    pub const STEP_NOISE: u64 = 0x4;
    pub const BATCH: u64 = 0x5;
    pub const PGD_INIT: u64 = 0x6;
    pub const DIFFUSE_NOISE: u64 = 0x7;
    pub const MONTE_CARLO: u64 = 0x8;
    pub const TRIAL: u64 = 0x9;
    pub const CHAIN: u64 = 0xa;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `base` and a label path.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
