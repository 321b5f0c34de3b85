//! Fixtures shared by the criterion benches.

use dk_core::deform::LocalOffsetGenerator;
use dk_core::random::{seeded_rng, uniform_tensor};
use dk_core::{ConvSpec, KernelScope, Tensor};

/// A convolution workload: input batch, kernel scope and spec.
pub struct ConvFixture {
    pub input: Tensor<f32>,
    pub scope: KernelScope<f32>,
    pub spec: ConvSpec,
}

/// Batch-32 activations of the classifier's middle blocks.
pub fn conv_fixture(
    depthwise: bool,
    channels: usize,
    size: usize,
    scope_size: usize,
) -> ConvFixture {
    let mut rng = seeded_rng(1);
    let spec = ConvSpec::same(3, depthwise, channels, channels).expect("valid spec");
    let kin = if depthwise { 1 } else { channels };
    let weights = uniform_tensor(&mut rng, [channels, kin, scope_size, scope_size], -0.5, 0.5);
    ConvFixture {
        input: uniform_tensor(&mut rng, [32, channels, size, size], 0.0, 1.0),
        scope: KernelScope::new(3, scope_size, weights).expect("valid scope"),
        spec,
    }
}

/// A local generator with small random weights, so offsets vary per location.
pub fn local_generator(spec: &ConvSpec) -> LocalOffsetGenerator<f32> {
    let mut g = LocalOffsetGenerator::for_target(spec).expect("valid target");
    g.weights = uniform_tensor(&mut seeded_rng(2), g.weights.dims(), -0.05, 0.05);
    g
}

/// Local offset field `(32, 18, size, size)` with values in `[-1, 1)`.
pub fn offset_field(size: usize) -> Tensor<f32> {
    uniform_tensor(&mut seeded_rng(3), [32, 18, size, size], -1.0, 1.0)
}
