use crate::random::{seeded_rng, uniform_tensor, DetRng};
use crate::tensor::{Dims, Tensor};

pub(crate) fn rng(seed: u64) -> DetRng {
    seeded_rng(seed)
}

pub(crate) fn random_tensor(rng: &mut DetRng, dims: Dims) -> Tensor<f64> {
    uniform_tensor(rng, dims, -1.0, 1.0)
}
