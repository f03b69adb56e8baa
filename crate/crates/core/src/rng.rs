//! Seeded random sources. Every stochastic path in the crate draws from a
//! ChaCha stream keyed by an explicit seed so results are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a purpose tag.
pub fn derive(seed: u64, tag: &str) -> SeededRng {
    // FNV-1a over the tag, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

pub fn normal_vec<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        })
        .collect()
}

pub fn normal_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std))
}

pub fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect())
}
