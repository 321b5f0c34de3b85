//! Deformable kernels, deformable convolutions and effective receptive fields.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod deform;
pub mod erf;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod random;
pub mod sampler;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use conv::{ConvSpec, KernelScope};
pub use error::{Error, Result};
pub use sampler::KernelOffsets;
pub use tensor::{Coord2, Real, Tensor};
