//! Counter-keyed random streams. Every draw is addressed by
//! `(seed, rollout, stage, purpose)`, so results do not depend on how
//! rollouts are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg::{self, Mat, Vector};

/// Recorded in run metadata.
pub const RNG_NAME: &str = "ChaCha8 seeded by splitmix64(seed, rollout, stage, purpose)";

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    InitialState = 1,
    ProcessNoise = 2,
    Action = 3,
    Bootstrap = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit key for one stream.
pub fn stream_key(seed: u64, rollout: u64, stage: u64, purpose: Purpose) -> u64 {
    let mut h = splitmix64(seed);
    for part in [rollout, stage, purpose as u64] {
        h = splitmix64(h ^ part);
    }
    h
}

pub fn stream(seed: u64, rollout: u64, stage: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, rollout, stage, purpose))
}

/// Draw from `N(mean, cov)` with a square-root factor of `cov`.
pub fn gaussian_draw(rng: &mut ChaCha8Rng, mean: &Vector, sqrt_cov: &Mat) -> Vector {
    let z = Vector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    mean + sqrt_cov * z
}

/// Square-root factor usable for sampling; zero matrices give zero.
pub fn sampling_factor(cov: &Mat) -> Result<Mat> {
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(Mat::zeros(cov.nrows(), cov.ncols()));
    }
    linalg::sqrt_factor(cov)
}
