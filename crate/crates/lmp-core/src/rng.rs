//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! the run seed plus a fixed stream id, so any artifact (weights, initial
//! noise, prompt embeddings) is reproducible on its own without replaying
//! the draws that precede it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::math::Mat;

/// Stream ids. Block weights use `BLOCK_WEIGHTS_BASE + block_index`.
pub mod streams {
    pub const EMBED: u64 = 1;
    pub const PROJECT: u64 = 2;
    pub const TARGET_INIT: u64 = 3;
    pub const EPS: u64 = 4;
    pub const REF_LATENT: u64 = 5;
    pub const TARGET_PROMPT: u64 = 6;
    pub const REF_PROMPT: u64 = 7;
    pub const BLOCK_WEIGHTS_BASE: u64 = 16;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * sigma)
        .collect()
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Mat {
    let data = gaussian_vec(rng, rows * cols, sigma);
    Mat::from_vec(rows, cols, data).expect("length matches by construction")
}
