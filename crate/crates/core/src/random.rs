//! Seeded, platform-independent random sources.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Dims, Real, Tensor};

pub type DetRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor<T: Real>(rng: &mut DetRng, dims: Dims, lo: f64, hi: f64) -> Tensor<T> {
    let len = dims.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.random_range(lo..hi)))
        .collect();
    Tensor::from_vec(dims, data).expect("finite uniform samples")
}

pub fn normal_vec<T: Real>(rng: &mut DetRng, len: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..len).map(|_| T::from_f64(dist.sample(rng))).collect()
}

pub fn normal_tensor<T: Real>(rng: &mut DetRng, dims: Dims, std: f64) -> Tensor<T> {
    let len = dims.iter().product();
    Tensor::from_vec(dims, normal_vec(rng, len, std)).expect("finite normal samples")
}
