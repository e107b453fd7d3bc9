//! Seeded random streams.
//!
//! Every consumer that must not perturb another gets its own ChaCha stream
//! derived from the run seed, so adding an observer or changing the eval
//! cadence never shifts the generator's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

pub type LabRng = ChaCha8Rng;

/// Independent stream ids.
pub mod stream {
    pub const GENERATOR: u64 = 1;
    pub const FAKE: u64 = 2;
    pub const DISCRIMINATOR: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TEACHER: u64 = 6;
    pub const DATA: u64 = 7;
    pub const PROBE: u64 = 8;
}

pub fn seeded(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut impl Rng) -> Real {
    rng.sample(StandardNormal)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, lo: Real, hi: Real) -> Real {
    let u: Real = rng.random();
    lo + (hi - lo) * u
}

pub fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| normal(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}
