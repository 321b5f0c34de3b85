//! Effective receptive fields: path enumeration over linear stacks, the
//! per-layer decomposition, and autodiff through real model graphs.
//!
//! A [`LinearStack`] is a chain of single-channel, stride-1, same-padded
//! layers with odd kernel size. Every layer reduces to a list of integer
//! displacements with weights; a data offset with a fractional part spreads
//! one tap over up to four displacements with bilinear weights. The ERF
//! `R(i; j) = ∂O_j / ∂I_i` is the sum over every path of displacements that
//! carries `j` to `i`, of the product of weights along the path.

use std::collections::BTreeMap;
use std::path::Path;

use crate::conv::{ConvSpec, KernelScope};
use crate::deform::{GlobalOffsetGenerator, LocalOffsetGenerator, OffsetGenerator};
use crate::error::{shape_err, Error, Result};
use crate::io::{write_pgm, write_tsr};
use crate::model::{ConvLayer, DeformKind, DeformLayer, GatingTrace, Layer, ModelGraph};
use crate::random::{seeded_rng, uniform_tensor};
use crate::sampler::{resample_kernel, tent_taps_1d, KernelOffsets};
use crate::tensor::Tensor;

/// Largest literal path count [`erf_enumerate_literal`] will walk.
pub const ENUMERATION_GUARD: f64 = 1e8;

/// One layer of a linear stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackLayer {
    /// `(1, 1, K', K')`.
    pub scope: KernelScope<f64>,
    pub kernel_offsets: Option<KernelOffsets<f64>>,
    /// Spatially constant data offsets, `(Δx, Δy)` per tap.
    pub data_offsets: Option<KernelOffsets<f64>>,
}

/// One weighted displacement contributed by tap `tap` of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Displacement {
    pub dy: i64,
    pub dx: i64,
    pub tap: usize,
    /// Bilinear share of the tap landing on this displacement.
    pub share: f64,
    /// Effective kernel value at the tap.
    pub weight: f64,
}

impl StackLayer {
    pub fn new(scope: KernelScope<f64>) -> Result<Self> {
        let [co, ci, _, _] = scope.weights().dims();
        if co != 1 || ci != 1 {
            return Err(shape_err("stack layers are single-channel"));
        }
        if scope.kernel_size().is_multiple_of(2) {
            return Err(Error::Invalid(
                "stack layers need an odd kernel size".into(),
            ));
        }
        Ok(Self {
            scope,
            kernel_offsets: None,
            data_offsets: None,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.scope.kernel_size()
    }

    /// Kernel after resampling at the (clipped) kernel offsets.
    pub fn effective_kernel(&self) -> Result<Tensor<f64>> {
        let offsets = self
            .kernel_offsets
            .clone()
            .unwrap_or_else(|| KernelOffsets::zeros(self.kernel_size()));
        resample_kernel(&self.scope, &offsets)
    }

    pub fn displacements(&self) -> Result<Vec<Displacement>> {
        let k = self.kernel_size();
        let pad = (k / 2) as f64;
        let kernel = self.effective_kernel()?;
        let mut out = Vec::with_capacity(4 * k * k);
        for t in 0..k * k {
            let weight = kernel.data()[t];
            let (ox, oy) = self.data_offsets.as_ref().map_or((0.0, 0.0), |d| d.get(t));
            let ux = (t % k) as f64 - pad + ox;
            let uy = (t / k) as f64 - pad + oy;
            for ty in tent_taps_1d(uy) {
                for tx in tent_taps_1d(ux) {
                    out.push(Displacement {
                        dy: ty.idx as i64,
                        dx: tx.idx as i64,
                        tap: t,
                        share: ty.w * tx.w,
                        weight,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearStack {
    pub layers: Vec<StackLayer>,
}

impl LinearStack {
    pub fn new(layers: Vec<StackLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid(
                "a linear stack needs at least one layer".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Rigid stack with the given `(1,1,K,K)` kernels.
    pub fn rigid(kernels: Vec<Tensor<f64>>) -> Result<Self> {
        let layers = kernels
            .into_iter()
            .map(|w| StackLayer::new(KernelScope::rigid(w)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// `n` rigid layers with weights uniform on `[lo, hi)`.
    pub fn random(n: usize, kernel_size: usize, seed: u64, lo: f64, hi: f64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        Self::rigid(
            (0..n)
                .map(|_| uniform_tensor(&mut rng, [1, 1, kernel_size, kernel_size], lo, hi))
                .collect(),
        )
    }

    /// `n` rigid layers with all-ones kernels.
    pub fn uniform(n: usize, kernel_size: usize) -> Result<Self> {
        Self::rigid(
            (0..n)
                .map(|_| Tensor::new([1, 1, kernel_size, kernel_size], 1.0))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn rf_half_width(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_size() / 2).sum()
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut StackLayer> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range for depth {n}")))
    }

    /// Replaces layer `layer` with a `scope_size` scope holding `scope`
    /// weights and sets its kernel offsets.
    pub fn set_kernel_offsets(
        &mut self,
        layer: usize,
        scope: KernelScope<f64>,
        offsets: KernelOffsets<f64>,
    ) -> Result<()> {
        let l = self.layer_mut(layer)?;
        if scope.kernel_size() != l.kernel_size() || offsets.kernel_size() != l.kernel_size() {
            return Err(shape_err(
                "kernel offsets do not match the layer kernel size",
            ));
        }
        let data = l.data_offsets.take();
        *l = StackLayer::new(scope)?;
        l.kernel_offsets = Some(offsets);
        l.data_offsets = data;
        Ok(())
    }

    pub fn set_data_offsets(&mut self, layer: usize, offsets: KernelOffsets<f64>) -> Result<()> {
        let l = self.layer_mut(layer)?;
        if offsets.kernel_size() != l.kernel_size() {
            return Err(shape_err("data offsets do not match the layer kernel size"));
        }
        l.data_offsets = Some(offsets);
        Ok(())
    }

    fn tables(&self) -> Result<Vec<Vec<Displacement>>> {
        self.layers.iter().map(StackLayer::displacements).collect()
    }

    /// Number of literal paths.
    pub fn path_count(&self) -> Result<f64> {
        Ok(self.tables()?.iter().map(|t| t.len() as f64).product())
    }

    /// The same stack as a model graph: same padding, fixed offsets emitted by
    /// zero-weight generators, and optionally a ReLU between layers.
    pub fn to_model(&self, relu_between: bool) -> Result<ModelGraph<f64>> {
        let mut layers = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 && relu_between {
                layers.push(Layer::Relu);
            }
            let spec = ConvSpec::same(l.kernel_size(), false, 1, 1)?;
            let kind = match (&l.kernel_offsets, &l.data_offsets) {
                (None, None) if l.scope.is_rigid() => {
                    layers.push(Layer::Rigid(ConvLayer {
                        spec,
                        kernel: l.scope.clone(),
                        bias: None,
                    }));
                    continue;
                }
                (_, None) => DeformKind::DkGlobal,
                (None, Some(_)) => DeformKind::Dc,
                (Some(_), Some(_)) => DeformKind::Dcdk,
            };
            let kernel_generator = match kind {
                DeformKind::DkGlobal => {
                    let off = l
                        .kernel_offsets
                        .clone()
                        .unwrap_or_else(|| KernelOffsets::zeros(l.kernel_size()));
                    Some(OffsetGenerator::Global(GlobalOffsetGenerator::constant(
                        1, &off,
                    )))
                }
                DeformKind::Dcdk => Some(OffsetGenerator::Local(LocalOffsetGenerator::constant(
                    &spec,
                    l.kernel_offsets.as_ref().expect("dcdk has kernel offsets"),
                )?)),
                _ => None,
            };
            let data_generator = l
                .data_offsets
                .as_ref()
                .map(|d| LocalOffsetGenerator::constant(&spec, d))
                .transpose()?;
            layers.push(Layer::Deform(DeformLayer {
                kind,
                spec,
                scope: l.scope.clone(),
                kernel_generator,
                data_generator,
                bias: None,
                lr_multiplier: 1.0,
            }));
        }
        Ok(ModelGraph::new(layers))
    }
}

/// A dense ERF over the input grid for one output location.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// `(y, x)` of the output unit.
    pub output: (usize, usize),
    /// Number of spatial layers between input and output.
    pub depth: usize,
    /// Half-width of the theoretical receptive field, in input pixels.
    pub rf_half_width: usize,
    /// Input-space location the theoretical receptive field is centered on.
    pub rf_center: (usize, usize),
    /// Row-major `height × width`.
    pub values: Vec<f64>,
}

impl ErfMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max_abs_diff(&self, other: &ErfMap) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err("ERF maps differ in size"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec([1, 1, self.height, self.width], self.values.clone())
            .expect("ERF values are finite")
    }

    pub fn write_tsr(&self, path: &Path) -> Result<()> {
        write_tsr(path, &self.to_tensor())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, &self.values, self.height, self.width)
    }
}

/// Literal path sum: walks every combination of one displacement per layer.
/// Fails with [`Error::Intractable`] beyond [`ENUMERATION_GUARD`] paths.
pub fn erf_enumerate_literal(stack: &LinearStack, i: (i64, i64), j: (i64, i64)) -> Result<f64> {
    let tables = stack.tables()?;
    literal_sum(&tables, (i.0 - j.0, i.1 - j.1))
}

fn literal_sum(tables: &[Vec<Displacement>], target: (i64, i64)) -> Result<f64> {
    let paths: f64 = tables.iter().map(|t| t.len() as f64).product();
    if paths > ENUMERATION_GUARD {
        return Err(Error::Intractable {
            paths,
            guard: ENUMERATION_GUARD,
        });
    }
    if tables.iter().any(Vec::is_empty) {
        return Ok(0.0);
    }
    let n = tables.len();
    let mut idx = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let (mut dy, mut dx, mut prod) = (0i64, 0i64, 1.0);
        for (t, &k) in tables.iter().zip(&idx) {
            let d = t[k];
            dy += d.dy;
            dx += d.dx;
            prod *= d.share * d.weight;
        }
        if (dy, dx) == target {
            total += prod;
        }
        let mut l = n;
        loop {
            if l == 0 {
                return Ok(total);
            }
            l -= 1;
            idx[l] += 1;
            if idx[l] < tables[l].len() {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// Sparse displacement distribution after composing every layer.
fn compose(tables: &[Vec<Displacement>]) -> BTreeMap<(i64, i64), f64> {
    let mut dist = BTreeMap::from([((0i64, 0i64), 1.0)]);
    for table in tables {
        let mut next = BTreeMap::new();
        for (&(y, x), &v) in &dist {
            for d in table {
                *next.entry((y + d.dy, x + d.dx)).or_insert(0.0) += v * d.share * d.weight;
            }
        }
        dist = next;
    }
    dist
}

/// Path sum by successive composition; cost grows linearly with depth.
pub fn erf_enumerate_dp(stack: &LinearStack, i: (i64, i64), j: (i64, i64)) -> Result<f64> {
    let dist = compose(&stack.tables()?);
    Ok(dist.get(&(i.0 - j.0, i.1 - j.1)).copied().unwrap_or(0.0))
}

/// Literal path sum when within the guard, otherwise composition.
pub fn erf_enumerate(stack: &LinearStack, i: (i64, i64), j: (i64, i64)) -> Result<f64> {
    match erf_enumerate_literal(stack, i, j) {
        Err(Error::Intractable { .. }) => erf_enumerate_dp(stack, i, j),
        other => other,
    }
}

/// Whole enumerated ERF of output `j` on an `height × width` grid.
pub fn erf_field(
    stack: &LinearStack,
    j: (usize, usize),
    height: usize,
    width: usize,
) -> Result<ErfMap> {
    if j.0 >= height || j.1 >= width {
        return Err(Error::OutOfBounds { y: j.0, x: j.1 });
    }
    let dist = compose(&stack.tables()?);
    let mut values = vec![0.0; height * width];
    for (&(dy, dx), &v) in &dist {
        let (y, x) = (j.0 as i64 + dy, j.1 as i64 + dx);
        if (0..height as i64).contains(&y) && (0..width as i64).contains(&x) {
            values[y as usize * width + x as usize] += v;
        }
    }
    Ok(ErfMap {
        height,
        width,
        output: j,
        depth: stack.depth(),
        rf_half_width: stack.rf_half_width(),
        rf_center: j,
        values,
    })
}

/// Path sum with layer `layer` (0-based) pinned to its single tap `tap`: that
/// layer contributes its effective weight and no displacement.
pub fn erf_enumerate_pinned(
    stack: &LinearStack,
    i: (i64, i64),
    j: (i64, i64),
    layer: usize,
    tap: usize,
) -> Result<f64> {
    let mut tables = stack.tables()?;
    let n = tables.len();
    let k = stack
        .layers
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range for depth {n}")))?
        .kernel_size();
    if tap >= k * k {
        return Err(Error::Invalid(format!(
            "tap {tap} out of range for kernel size {k}"
        )));
    }
    let weight = stack.layers[layer].effective_kernel()?.data()[tap];
    tables[layer] = vec![Displacement {
        dy: 0,
        dx: 0,
        tap,
        share: 1.0,
        weight,
    }];
    let target = (i.0 - j.0, i.1 - j.1);
    match literal_sum(&tables, target) {
        Err(Error::Intractable { .. }) => Ok(compose(&tables).get(&target).copied().unwrap_or(0.0)),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecomposeCheck {
    /// Direct path sum.
    pub direct: f64,
    /// Sum over the pinned layer's taps of shifted pinned path sums.
    pub decomposed: f64,
    pub residual: f64,
}

/// Checks `R(i; j) = Σ_t Σ_d share · R_pinned(i; j + d, layer, t)`, where `d`
/// runs over the displacements that tap `t` of `layer` lands on.
pub fn erf_decompose_check(
    stack: &LinearStack,
    i: (i64, i64),
    j: (i64, i64),
    layer: usize,
) -> Result<DecomposeCheck> {
    let direct = erf_enumerate(stack, i, j)?;
    let decomposed = decomposed_sum(stack, i, j, layer)?;
    Ok(DecomposeCheck {
        direct,
        decomposed,
        residual: (direct - decomposed).abs(),
    })
}

fn decomposed_sum(stack: &LinearStack, i: (i64, i64), j: (i64, i64), layer: usize) -> Result<f64> {
    let table = stack
        .layers
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range")))?
        .displacements()?;
    let mut total = 0.0;
    for d in table {
        total += d.share * erf_enumerate_pinned(stack, i, (j.0 + d.dy, j.1 + d.dx), layer, d.tap)?;
    }
    Ok(total)
}

/// ERF of a stack whose deformable layer carries kernel offsets, expanded
/// over that layer: shifts are the rigid taps, values the resampled weights.
/// Uses the last layer with kernel offsets, or the last layer if none has any.
pub fn erf_dk(stack: &LinearStack, i: (i64, i64), j: (i64, i64)) -> Result<f64> {
    let layer = stack
        .layers
        .iter()
        .rposition(|l| l.kernel_offsets.is_some())
        .unwrap_or(stack.depth() - 1);
    decomposed_sum(stack, i, j, layer)
}

/// ERF of a stack whose deformable layer carries data offsets, expanded over
/// that layer: shifts are the displaced taps, values the rigid weights.
/// Uses the last layer with data offsets, or the last layer if none has any.
pub fn erf_dc(stack: &LinearStack, i: (i64, i64), j: (i64, i64)) -> Result<f64> {
    let layer = stack
        .layers
        .iter()
        .rposition(|l| l.data_offsets.is_some())
        .unwrap_or(stack.depth() - 1);
    decomposed_sum(stack, i, j, layer)
}

/// ERF of trunk output `j` by backpropagation, summed over output and input
/// channels. `input` must hold a single image.
pub fn erf_backprop(
    model: &ModelGraph<f64>,
    input: &Tensor<f64>,
    j: (usize, usize),
) -> Result<(ErfMap, GatingTrace)> {
    let [n, _, h, w] = input.dims();
    if n != 1 {
        return Err(shape_err("erf_backprop takes a single image"));
    }
    let end = model.trunk_end();
    let trace = model.forward_to(input, end)?;
    let out = &trace.activations[end];
    let [_, c, ho, wo] = out.dims();
    if j.0 >= ho || j.1 >= wo {
        return Err(Error::OutOfBounds { y: j.0, x: j.1 });
    }
    let mut seed = Tensor::zeros(out.dims())?;
    for ch in 0..c {
        seed.set(0, ch, j.0, j.1, 1.0);
    }
    let (_, grad) = model.backward_from(&trace, end, &seed, true)?;
    let grad = grad.expect("input gradient requested");
    let mut values = vec![0.0; h * w];
    for ch in 0..grad.channels() {
        for (v, g) in values.iter_mut().zip(grad.plane(0, ch)) {
            *v += g;
        }
    }
    let (rf_half_width, stride) = model.receptive_field();
    let map = ErfMap {
        height: h,
        width: w,
        output: j,
        depth: model.conv_depth(),
        rf_half_width,
        rf_center: (j.0 * stride, j.1 * stride),
        values,
    };
    Ok((map, GatingTrace::from_trace(model, &trace)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErfStats {
    /// `(y, x)` center of `|R|` mass.
    pub mass_center: (f64, f64),
    /// `[[yy, yx], [xy, xx]]` covariance of `|R|` mass.
    pub covariance: [[f64; 2]; 2],
    /// Trace of the covariance.
    pub second_moment: f64,
    /// Pixels with `|R| > 1e-3 · max |R|`.
    pub support: usize,
    /// Support over the theoretical receptive-field box clipped to the grid.
    pub density: f64,
}

pub const SUPPORT_THRESHOLD: f64 = 1e-3;

pub fn erf_stats(map: &ErfMap) -> Result<ErfStats> {
    let mass: f64 = map.values.iter().map(|v| v.abs()).sum();
    if mass.is_nan() || mass <= 0.0 {
        return Err(Error::Invalid("ERF is identically zero".into()));
    }
    let max = map.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut my, mut mx) = (0.0, 0.0);
    let mut support = 0;
    for y in 0..map.height {
        for x in 0..map.width {
            let a = map.get(y, x).abs();
            my += a * y as f64;
            mx += a * x as f64;
            if a > SUPPORT_THRESHOLD * max {
                support += 1;
            }
        }
    }
    my /= mass;
    mx /= mass;
    let mut cov = [[0.0; 2]; 2];
    for y in 0..map.height {
        for x in 0..map.width {
            let a = map.get(y, x).abs() / mass;
            let (ey, ex) = (y as f64 - my, x as f64 - mx);
            cov[0][0] += a * ey * ey;
            cov[0][1] += a * ey * ex;
            cov[1][1] += a * ex * ex;
        }
    }
    cov[1][0] = cov[0][1];
    let span = |c: usize, len: usize| {
        let lo = c.saturating_sub(map.rf_half_width);
        let hi = (c + map.rf_half_width).min(len - 1);
        hi - lo + 1
    };
    let area = span(map.rf_center.0, map.height) * span(map.rf_center.1, map.width);
    Ok(ErfStats {
        mass_center: (my, mx),
        covariance: cov,
        second_moment: cov[0][0] + cov[1][1],
        support,
        density: support as f64 / area as f64,
    })
}
