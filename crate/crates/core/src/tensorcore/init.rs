use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor2D;
use crate::scalar::Scalar;

/// The crate-wide deterministic generator.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor2D<T> {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..=a))).collect();
    Tensor2D::from_vec(fan_in, fan_out, data).expect("shape by construction")
}
