//! Counter-based random streams.
//!
//! Every random object in the crate is drawn from a ChaCha stream keyed by a
//! `(seed, stream)` pair, so the order in which layers, seeds or sweep points
//! are generated never changes the numbers they receive.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags. Layer weights use their layer index directly (1..=L), so
/// the remaining purposes live far above any realistic depth.
pub mod stream {
    pub const TARGET_LAYER_BASE: u64 = 1 << 20;
    pub const THETA_STAR: u64 = 1 << 32;
    pub const TRAIN_INPUTS: u64 = (1 << 32) + 1;
    pub const TEST_INPUTS: u64 = (1 << 32) + 2;
    pub const TRAIN_NOISE: u64 = (1 << 32) + 3;
    pub const TEST_NOISE: u64 = (1 << 32) + 4;
    pub const LEARNER_GAUSS_NOISE: u64 = (1 << 32) + 5;
    pub const TARGET_GAUSS_NOISE: u64 = (1 << 32) + 6;
    pub const TEST_LEARNER_GAUSS_NOISE: u64 = (1 << 32) + 7;
    pub const TEST_TARGET_GAUSS_NOISE: u64 = (1 << 32) + 8;
    pub const SPECTRUM_INPUTS: u64 = (1 << 32) + 9;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a master seed with a run index (splitmix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // Row-major fill so that the draw order does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = std * z;
        }
    }
    m
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}
