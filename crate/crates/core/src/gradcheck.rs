//! Central finite-difference checks for every hand-written backward pass.
//!
//! Each registered op builds a small seeded instance, forms the scalar
//! `L = Σ r ⊙ output` with a fixed random `r` (or a loss, for whole models),
//! and compares the analytic gradient against central differences. Offsets
//! whose sampled coordinate lies within [`KINK_MARGIN`] of a tent kink are
//! excluded component-wise; when offsets are produced by a generator, the
//! instance is redrawn until every coordinate is clear of kinks.

use std::fmt;

use rand::Rng;

use crate::conv::{conv2d_backward, conv2d_rigid, ConvSpec, KernelScope};
use crate::deform::{
    deform_backward, deform_forward, dk_backward, GlobalOffsetGenerator, LocalOffsetGenerator,
    OffsetGenerator,
};
use crate::error::{Error, Result};
use crate::model::{softmax_cross_entropy, DeformKind, Layer, LayerDesc, ModelGraph};
use crate::random::{normal_tensor, normal_vec, seeded_rng, uniform_tensor, DetRng};
use crate::sampler::{resample_kernel, sampler_grad_offsets, sampler_grad_weights, KernelOffsets};
use crate::tensor::{fully_connected, fully_connected_backward, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-3;
pub const LINEAR_TOLERANCE: f64 = 1e-6;
pub const OFFSET_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpInfo {
    pub name: &'static str,
    pub tolerance: f64,
    pub about: &'static str,
}

pub const GRADCHECK_OPS: &[OpInfo] = &[
    OpInfo {
        name: "conv_weights",
        tolerance: LINEAR_TOLERANCE,
        about: "rigid convolution, weight gradient",
    },
    OpInfo {
        name: "conv_input",
        tolerance: LINEAR_TOLERANCE,
        about: "rigid convolution, input gradient",
    },
    OpInfo {
        name: "sampler_offsets",
        tolerance: OFFSET_TOLERANCE,
        about: "kernel sampler, offset gradient at one location",
    },
    OpInfo {
        name: "sampler_weights",
        tolerance: LINEAR_TOLERANCE,
        about: "kernel sampler, scope-weight gradient",
    },
    OpInfo {
        name: "dk_offsets",
        tolerance: OFFSET_TOLERANCE,
        about: "local deformable kernel, offset-field gradient",
    },
    OpInfo {
        name: "dk_weights",
        tolerance: LINEAR_TOLERANCE,
        about: "local deformable kernel, scope-weight gradient",
    },
    OpInfo {
        name: "dk_input",
        tolerance: OFFSET_TOLERANCE,
        about: "deformable kernel layer, input gradient through its generator",
    },
    OpInfo {
        name: "dc_offsets",
        tolerance: OFFSET_TOLERANCE,
        about: "deformable convolution, data-offset gradient",
    },
    OpInfo {
        name: "dc_input",
        tolerance: LINEAR_TOLERANCE,
        about: "deformable convolution, input gradient at fixed offsets",
    },
    OpInfo {
        name: "dcdk_offsets",
        tolerance: OFFSET_TOLERANCE,
        about: "combined operator, kernel and data offset gradients",
    },
    OpInfo {
        name: "generator_params",
        tolerance: OFFSET_TOLERANCE,
        about: "local offset generator parameters through a DK layer",
    },
    OpInfo {
        name: "global_generator_params",
        tolerance: OFFSET_TOLERANCE,
        about: "global offset generator parameters through a DK layer",
    },
    OpInfo {
        name: "fc",
        tolerance: LINEAR_TOLERANCE,
        about: "fully connected layer, weight, bias and input gradients",
    },
    OpInfo {
        name: "model",
        tolerance: OFFSET_TOLERANCE,
        about: "small network with every layer kind, cross-entropy loss",
    },
];

pub fn op_info(name: &str) -> Result<&'static OpInfo> {
    GRADCHECK_OPS
        .iter()
        .find(|o| o.name == name)
        .ok_or_else(|| Error::UnknownOp(name.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub seed: u64,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "op={}", self.op)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "checked={}", self.checked)?;
        writeln!(f, "excluded={}", self.excluded)?;
        writeln!(f, "max_rel_error={:e}", self.max_rel_error)?;
        writeln!(f, "mean_rel_error={:e}", self.mean_rel_error)?;
        writeln!(f, "tolerance={:e}", self.tolerance)?;
        writeln!(f, "pass={}", self.pass)
    }
}

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central differences of `f` at `x`, one component at a time.
pub fn finite_diff(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        let d = (up - down) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFinite("finite difference"));
        }
        out.push(d);
    }
    Ok(out)
}

/// Runs `op` on the instance drawn from `seed`. `tolerance` overrides the
/// registered one.
pub fn gradcheck_op(op: &str, seed: u64, tolerance: Option<f64>) -> Result<GradCheckReport> {
    let info = op_info(op)?;
    let tol = tolerance.unwrap_or(info.tolerance);
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::Invalid(format!(
            "tolerance must be non-negative, got {tol}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let probe = match op {
        "conv_weights" => conv_probe(&mut rng, false)?,
        "conv_input" => conv_probe(&mut rng, true)?,
        "sampler_offsets" => sampler_probe(&mut rng, true)?,
        "sampler_weights" => sampler_probe(&mut rng, false)?,
        "dk_offsets" => deform_probe(&mut rng, Target::KernelOffsets)?,
        "dk_weights" => deform_probe(&mut rng, Target::Scope)?,
        "dc_offsets" => deform_probe(&mut rng, Target::DataOffsets)?,
        "dc_input" => deform_probe(&mut rng, Target::Input)?,
        "dcdk_offsets" => deform_probe(&mut rng, Target::BothOffsets)?,
        "dk_input" => generator_probe(&mut rng, false, true)?,
        "generator_params" => generator_probe(&mut rng, false, false)?,
        "global_generator_params" => generator_probe(&mut rng, true, false)?,
        "fc" => fc_probe(&mut rng)?,
        "model" => model_probe(&mut rng)?,
        _ => unreachable!("registry and dispatch list the same ops"),
    };
    probe.report(op, seed, tol)
}

type Objective = Box<dyn Fn(&[f64]) -> Result<f64>>;

struct Probe {
    params: Vec<f64>,
    analytic: Vec<f64>,
    /// Components to skip.
    skip: Vec<bool>,
    /// Extra exclusions from discarded draws.
    discarded: usize,
    objective: Objective,
}

impl Probe {
    fn report(self, op: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
        let numeric = finite_diff(&self.objective, &self.params, FD_STEP)?;
        let mut max = 0.0f64;
        let mut sum = 0.0;
        let mut checked = 0;
        for ((a, n), skip) in self.analytic.iter().zip(&numeric).zip(&self.skip) {
            if *skip {
                continue;
            }
            let e = rel_error(*a, *n);
            max = max.max(e);
            sum += e;
            checked += 1;
        }
        let excluded = self.skip.iter().filter(|s| **s).count() + self.discarded;
        Ok(GradCheckReport {
            op: op.to_string(),
            seed,
            checked,
            excluded,
            max_rel_error: max,
            mean_rel_error: if checked > 0 {
                sum / checked as f64
            } else {
                0.0
            },
            tolerance,
            pass: checked > 0 && max <= tolerance,
        })
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn near_kink(coord: f64) -> bool {
    (coord - coord.round()).abs() < KINK_MARGIN
}

/// Per-component kink flags for a `(N, 2K², H, W)` kernel-offset field.
fn kernel_kinks(field: &Tensor<f64>, scope: &KernelScope<f64>) -> Vec<bool> {
    let plane = field.plane_len();
    let per_item = field.channels() * plane;
    field
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let ch = (idx % per_item) / plane;
            let (bx, by) = scope.base_index(ch / 2);
            near_kink(if ch.is_multiple_of(2) { bx } else { by } + v)
        })
        .collect()
}

/// Data offsets add to integer tap positions, so kinks sit at integer offsets.
fn data_kinks(field: &Tensor<f64>) -> Vec<bool> {
    field.data().iter().map(|&v| near_kink(v)).collect()
}

fn random_conv_spec(rng: &mut DetRng) -> Result<ConvSpec> {
    let stride = rng.random_range(1..=2);
    if rng.random_bool(0.5) {
        ConvSpec::new(3, stride, 1, true, 3, 3)
    } else {
        ConvSpec::new(3, stride, 1, false, 2, 3)
    }
}

fn conv_probe(rng: &mut DetRng, wrt_input: bool) -> Result<Probe> {
    let spec = random_conv_spec(rng)?;
    let input = uniform_tensor::<f64>(rng, [2, spec.in_channels, 6, 6], -1.0, 1.0);
    let weights = uniform_tensor::<f64>(
        rng,
        [spec.out_channels, spec.kernel_in_channels(), 3, 3],
        -1.0,
        1.0,
    );
    let (ho, wo) = spec.output_size(6, 6)?;
    let r = uniform_tensor::<f64>(rng, [2, spec.out_channels, ho, wo], -1.0, 1.0);
    let grads = conv2d_backward(&input, &KernelScope::rigid(weights.clone())?, &spec, &r)?;
    let (params, analytic, objective): (Vec<f64>, Vec<f64>, Objective) = if wrt_input {
        let wdims = weights.clone();
        (
            input.data().to_vec(),
            grads.input.into_vec(),
            Box::new(move |p| {
                let x = Tensor::from_vec(input.dims(), p.to_vec())?;
                Ok(dot(
                    &conv2d_rigid(&x, &KernelScope::rigid(wdims.clone())?, &spec)?,
                    &r,
                ))
            }),
        )
    } else {
        let dims = weights.dims();
        (
            weights.data().to_vec(),
            grads.weights.into_vec(),
            Box::new(move |p| {
                let w = KernelScope::rigid(Tensor::from_vec(dims, p.to_vec())?)?;
                Ok(dot(&conv2d_rigid(&input, &w, &spec)?, &r))
            }),
        )
    };
    let skip = vec![false; params.len()];
    Ok(Probe {
        params,
        analytic,
        skip,
        discarded: 0,
        objective,
    })
}

fn sampler_probe(rng: &mut DetRng, wrt_offsets: bool) -> Result<Probe> {
    let (co, ci, k, s) = (2, 3, 3, 4);
    let scope = KernelScope::new(k, s, uniform_tensor(rng, [co, ci, s, s], -1.0, 1.0))?;
    let offsets = KernelOffsets::new(
        k,
        (0..2 * k * k)
            .map(|_| rng.random_range(-1.2..1.2))
            .collect(),
    )?;
    let patch = uniform_tensor::<f64>(rng, [1, ci, k, k], -1.0, 1.0);
    let up: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
    let value = {
        let (patch, up) = (patch.clone(), up.clone());
        move |scope: &KernelScope<f64>, off: &KernelOffsets<f64>| -> Result<f64> {
            let w = resample_kernel(scope, off)?;
            let k2 = k * k;
            let mut total = 0.0;
            for (o, g) in up.iter().enumerate() {
                for c in 0..ci {
                    let wc = &w.data()[(o * ci + c) * k2..][..k2];
                    let pc = &patch.data()[c * k2..][..k2];
                    total += g * wc.iter().zip(pc).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Ok(total)
        }
    };
    if wrt_offsets {
        let analytic = sampler_grad_offsets(&scope, &offsets, &patch, &up)?;
        let field = Tensor::from_vec([1, 2 * k * k, 1, 1], offsets.values().to_vec())?;
        let skip = kernel_kinks(&field, &scope);
        Ok(Probe {
            params: offsets.values().to_vec(),
            analytic,
            skip,
            discarded: 0,
            objective: Box::new(move |p| value(&scope, &KernelOffsets::new(k, p.to_vec())?)),
        })
    } else {
        let analytic = sampler_grad_weights(&scope, &offsets, &patch, &up)?.into_vec();
        let params = scope.weights().data().to_vec();
        let skip = vec![false; params.len()];
        let dims = scope.weights().dims();
        Ok(Probe {
            params,
            analytic,
            skip,
            discarded: 0,
            objective: Box::new(move |p| {
                value(
                    &KernelScope::new(k, s, Tensor::from_vec(dims, p.to_vec())?)?,
                    &offsets,
                )
            }),
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Target {
    KernelOffsets,
    DataOffsets,
    BothOffsets,
    Scope,
    Input,
}

/// Deformable operator with explicit offset fields; depthwise or general
/// channel mixing is drawn from the seed.
fn deform_probe(rng: &mut DetRng, target: Target) -> Result<Probe> {
    let depthwise = rng.random_bool(0.5);
    let spec = if depthwise {
        ConvSpec::new(3, 1, 1, true, 2, 2)?
    } else {
        ConvSpec::new(3, 1, 1, false, 2, 2)?
    };
    let (h, w, k2) = (5, 5, 9);
    let with_kernel = matches!(
        target,
        Target::KernelOffsets | Target::BothOffsets | Target::Scope
    );
    let with_data = matches!(
        target,
        Target::DataOffsets | Target::BothOffsets | Target::Input
    );
    let s = if with_kernel { 4 } else { 3 };
    let scope = KernelScope::new(
        3,
        s,
        uniform_tensor(rng, [2, spec.kernel_in_channels(), s, s], -1.0, 1.0),
    )?;
    let input = uniform_tensor::<f64>(rng, [1, 2, h, w], -1.0, 1.0);
    let koff = with_kernel.then(|| uniform_tensor::<f64>(rng, [1, 2 * k2, h, w], -1.2, 1.2));
    let doff = with_data.then(|| uniform_tensor::<f64>(rng, [1, 2 * k2, h, w], -1.5, 1.5));
    let r = uniform_tensor::<f64>(rng, [1, 2, h, w], -1.0, 1.0);
    let g = deform_backward(&input, &scope, &spec, koff.as_ref(), doff.as_ref(), &r)?;
    let eval = move |x: &Tensor<f64>,
                     sc: &KernelScope<f64>,
                     ko: Option<&Tensor<f64>>,
                     d: Option<&Tensor<f64>>| {
        Ok(dot(&deform_forward(x, sc, &spec, ko, d)?, &r))
    };
    let (params, analytic, skip, objective): (Vec<f64>, Vec<f64>, Vec<bool>, Objective) =
        match target {
            Target::KernelOffsets => {
                let ko = koff.expect("kernel offsets drawn");
                let skip = kernel_kinks(&ko, &scope);
                let dims = ko.dims();
                (
                    ko.into_vec(),
                    g.kernel_offsets.expect("kernel offset grad").into_vec(),
                    skip,
                    Box::new(move |p| {
                        eval(
                            &input,
                            &scope,
                            Some(&Tensor::from_vec(dims, p.to_vec())?),
                            None,
                        )
                    }),
                )
            }
            Target::DataOffsets => {
                let d = doff.expect("data offsets drawn");
                let skip = data_kinks(&d);
                let dims = d.dims();
                (
                    d.into_vec(),
                    g.data_offsets.expect("data offset grad").into_vec(),
                    skip,
                    Box::new(move |p| {
                        eval(
                            &input,
                            &scope,
                            None,
                            Some(&Tensor::from_vec(dims, p.to_vec())?),
                        )
                    }),
                )
            }
            Target::BothOffsets => {
                let ko = koff.expect("kernel offsets drawn");
                let d = doff.expect("data offsets drawn");
                let mut skip = kernel_kinks(&ko, &scope);
                skip.extend(data_kinks(&d));
                let n = ko.len();
                let dims = ko.dims();
                let mut params = ko.into_vec();
                params.extend_from_slice(d.data());
                let mut analytic = g.kernel_offsets.expect("kernel offset grad").into_vec();
                analytic.extend(g.data_offsets.expect("data offset grad").into_vec());
                (
                    params,
                    analytic,
                    skip,
                    Box::new(move |p| {
                        let ko = Tensor::from_vec(dims, p[..n].to_vec())?;
                        let d = Tensor::from_vec(dims, p[n..].to_vec())?;
                        eval(&input, &scope, Some(&ko), Some(&d))
                    }),
                )
            }
            Target::Scope => {
                let dims = scope.weights().dims();
                let params = scope.weights().data().to_vec();
                (
                    params.clone(),
                    g.scope.into_vec(),
                    vec![false; params.len()],
                    Box::new(move |p| {
                        let sc = KernelScope::new(3, s, Tensor::from_vec(dims, p.to_vec())?)?;
                        eval(&input, &sc, koff.as_ref(), None)
                    }),
                )
            }
            Target::Input => {
                let dims = input.dims();
                let params = input.data().to_vec();
                (
                    params.clone(),
                    g.input.into_vec(),
                    vec![false; params.len()],
                    Box::new(move |p| {
                        eval(
                            &Tensor::from_vec(dims, p.to_vec())?,
                            &scope,
                            None,
                            doff.as_ref(),
                        )
                    }),
                )
            }
        };
    Ok(Probe {
        params,
        analytic,
        skip,
        discarded: 0,
        objective,
    })
}

/// Redraws generator parameters until no sampled coordinate sits near a
/// kink; returns the generator and the number of kink-adjacent coordinates
/// seen in discarded draws.
fn clear_generator(
    rng: &mut DetRng,
    global: bool,
    spec: &ConvSpec,
    input: &Tensor<f64>,
    scope: &KernelScope<f64>,
) -> Result<(OffsetGenerator<f64>, usize)> {
    let k2 = spec.kernel_size * spec.kernel_size;
    let mut discarded = 0;
    for _ in 0..1000 {
        let bias: Vec<f64> = (0..2 * k2).map(|_| rng.random_range(-1.2..1.2)).collect();
        let gen = if global {
            let weights = normal_vec(rng, 2 * k2 * spec.in_channels, 0.5);
            OffsetGenerator::Global(GlobalOffsetGenerator {
                in_channels: spec.in_channels,
                kernel_size: 3,
                weights,
                bias,
            })
        } else {
            let mut g = LocalOffsetGenerator::for_target(spec)?;
            g.weights = normal_tensor(rng, g.weights.dims(), 0.2);
            g.bias = bias;
            OffsetGenerator::Local(g)
        };
        let kinks = kernel_kinks(&gen.forward(input)?, scope)
            .iter()
            .filter(|k| **k)
            .count();
        if kinks == 0 {
            return Ok((gen, discarded));
        }
        discarded += kinks;
    }
    Err(Error::Invalid(
        "could not draw a kink-free generator instance".into(),
    ))
}

fn generator_probe(rng: &mut DetRng, global: bool, wrt_input: bool) -> Result<Probe> {
    let spec = ConvSpec::new(3, 1, 1, true, 2, 2)?;
    let scope = KernelScope::new(3, 4, uniform_tensor(rng, [2, 1, 4, 4], -1.0, 1.0))?;
    let input = uniform_tensor::<f64>(rng, [2, 2, 5, 5], -1.0, 1.0);
    let r = uniform_tensor::<f64>(rng, [2, 2, 5, 5], -1.0, 1.0);
    let (gen, discarded) = clear_generator(rng, global, &spec, &input, &scope)?;
    let g = dk_backward(&input, &scope, &gen, &spec, &r)?;
    let forward = {
        let (scope, r) = (scope.clone(), r.clone());
        move |x: &Tensor<f64>, gen: &OffsetGenerator<f64>| -> Result<f64> {
            let off = gen.forward(x)?;
            Ok(dot(
                &deform_forward(x, &scope, &spec, Some(&off), None)?,
                &r,
            ))
        }
    };
    let (params, analytic, objective): (Vec<f64>, Vec<f64>, Objective) = if wrt_input {
        let dims = input.dims();
        (
            input.data().to_vec(),
            g.input.into_vec(),
            Box::new(move |p| forward(&Tensor::from_vec(dims, p.to_vec())?, &gen)),
        )
    } else {
        let (w, b) = gen.params();
        let nw = w.len();
        let mut params = w.to_vec();
        params.extend_from_slice(b);
        let mut analytic = g.generator.weights;
        analytic.extend(g.generator.bias);
        (
            params,
            analytic,
            Box::new(move |p| {
                let mut gen = gen.clone();
                let (w, b) = gen.params_mut();
                w.copy_from_slice(&p[..nw]);
                b.copy_from_slice(&p[nw..]);
                forward(&input, &gen)
            }),
        )
    };
    let skip = vec![false; params.len()];
    Ok(Probe {
        params,
        analytic,
        skip,
        discarded,
        objective,
    })
}

fn fc_probe(rng: &mut DetRng) -> Result<Probe> {
    let (n, c, m) = (2, 5, 3);
    let input = uniform_tensor::<f64>(rng, [n, c, 1, 1], -1.0, 1.0);
    let weights: Vec<f64> = (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = uniform_tensor::<f64>(rng, [n, m, 1, 1], -1.0, 1.0);
    let g = fully_connected_backward(&input, &weights, &r)?;
    let mut params = input.data().to_vec();
    params.extend_from_slice(&weights);
    params.extend_from_slice(&bias);
    let mut analytic = g.input.into_vec();
    analytic.extend(g.weights);
    analytic.extend(g.bias);
    let skip = vec![false; params.len()];
    Ok(Probe {
        params,
        analytic,
        skip,
        discarded: 0,
        objective: Box::new(move |p| {
            let x = Tensor::from_vec([n, c, 1, 1], p[..n * c].to_vec())?;
            let (w, b) = p[n * c..].split_at(m * c);
            Ok(dot(&fully_connected(&x, w, b)?, &r))
        }),
    })
}

fn model_descs() -> Result<Vec<LayerDesc>> {
    Ok(vec![
        LayerDesc::Rigid {
            spec: ConvSpec::new(3, 1, 1, false, 1, 2)?,
            bias: true,
        },
        LayerDesc::Relu,
        LayerDesc::Deform {
            kind: DeformKind::Dcdk,
            spec: ConvSpec::new(3, 2, 1, true, 2, 2)?,
            scope_size: 4,
            bias: true,
            lr_multiplier: 1.0,
        },
        LayerDesc::Relu,
        LayerDesc::Deform {
            kind: DeformKind::DkGlobal,
            spec: ConvSpec::new(3, 1, 1, false, 2, 3)?,
            scope_size: 4,
            bias: false,
            lr_multiplier: 1.0,
        },
        LayerDesc::Relu,
        LayerDesc::Pool,
        LayerDesc::Fc {
            inputs: 3,
            outputs: 4,
        },
    ])
}

/// Every sampled coordinate and every ReLU pre-activation clear of kinks.
fn model_is_clear(model: &ModelGraph<f64>, input: &Tensor<f64>) -> Result<usize> {
    let trace = model.forward(input)?;
    let mut kinks = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Deform(d) => {
                let (ko, dof) = trace.offsets[i]
                    .as_ref()
                    .expect("deform layers record offsets");
                if let Some(ko) = ko {
                    kinks += kernel_kinks(ko, &d.scope).iter().filter(|k| **k).count();
                }
                if let Some(dof) = dof {
                    kinks += data_kinks(dof).iter().filter(|k| **k).count();
                }
            }
            Layer::Relu => {
                kinks += trace.activations[i]
                    .data()
                    .iter()
                    .filter(|v| v.abs() < KINK_MARGIN)
                    .count()
            }
            _ => {}
        }
    }
    Ok(kinks)
}

fn model_probe(rng: &mut DetRng) -> Result<Probe> {
    let input = uniform_tensor::<f64>(rng, [2, 1, 7, 7], 0.0, 1.0);
    let labels = vec![rng.random_range(0..4), rng.random_range(0..4)];
    let mut discarded = 0;
    let mut model = ModelGraph::from_descs(&model_descs()?)?;
    for attempt in 0.. {
        if attempt == 1000 {
            return Err(Error::Invalid(
                "could not draw a kink-free model instance".into(),
            ));
        }
        model.init_random(rng);
        for l in &mut model.layers {
            if let Layer::Deform(d) = l {
                for g in [d.kernel_generator.as_mut().map(|g| g.params_mut())]
                    .into_iter()
                    .flatten()
                {
                    g.0.iter_mut()
                        .for_each(|v| *v = rng.random_range(-0.3..0.3));
                    g.1.iter_mut()
                        .for_each(|v| *v = rng.random_range(-1.2..1.2));
                }
                if let Some(g) = &mut d.data_generator {
                    g.weights
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-0.3..0.3));
                    g.bias
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-1.5..1.5));
                }
            }
        }
        let kinks = model_is_clear(&model, &input)?;
        if kinks == 0 {
            break;
        }
        discarded += kinks;
    }
    let trace = model.forward(&input)?;
    let (_, up) = softmax_cross_entropy(trace.output(), &labels)?;
    let (grads, _) = model.backward_from(&trace, model.layers.len(), &up, false)?;
    let params: Vec<f64> = model
        .params()
        .into_iter()
        .flat_map(|(_, p)| p.to_vec())
        .collect();
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let skip = vec![false; params.len()];
    Ok(Probe {
        params,
        analytic,
        skip,
        discarded,
        objective: Box::new(move |p| {
            let mut m = model.clone();
            let mut at = 0;
            for slot in m.params_mut() {
                let len = slot.len();
                slot.copy_from_slice(&p[at..at + len]);
                at += len;
            }
            Ok(softmax_cross_entropy(m.forward(&input)?.output(), &labels)?.0)
        }),
    })
}
