//! Named, seeded random streams.
//!
//! Every consumer draws from its own SplitMix64 stream derived from
//! `(seed, name)`, so adding a new parameter or sample never shifts the
//! values drawn by existing ones.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::element::Element;
use crate::error::Result;
use crate::tensor::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Independent generator for the stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> SplitMix64 {
    let h = fnv1a(fnv1a(FNV_OFFSET, &seed.to_le_bytes()), name.as_bytes());
    SplitMix64::seed_from_u64(h)
}

/// Values uniform in `[-bound, bound)`.
pub fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

/// Standard normal samples.
pub fn normal<T: Element>(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        T::from_f64(v)
    })
}
