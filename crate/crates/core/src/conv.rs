//! Rigid 2-D convolutions (general and depthwise) and their exact gradients.
//!
//! Convolution here is cross-correlation, `O_j = Σ_k I_{j+k} W_k`, with zero
//! padding. Tap `(ky, kx)` of a kernel reads input row `oy*stride + ky - padding`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{relu, Coord2, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        kernel_size: usize,
        stride: usize,
        padding: usize,
        depthwise: bool,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let spec = Self {
            kernel_size,
            stride,
            padding,
            depthwise,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Stride-1 convolution padded so the output keeps the input size (odd K).
    pub fn same(
        kernel_size: usize,
        depthwise: bool,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Self::new(
            kernel_size,
            1,
            kernel_size / 2,
            depthwise,
            in_channels,
            out_channels,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0
            || self.stride == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Invalid(format!(
                "conv spec has a zero field: {self:?}"
            )));
        }
        if self.depthwise && self.in_channels != self.out_channels {
            return Err(Error::Invalid(format!(
                "depthwise conv needs in_channels == out_channels, got {} and {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Input channels seen by one output channel's kernel.
    pub fn kernel_in_channels(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.in_channels
        }
    }

    /// Output `(height, width)` for an input plane, or an error if it would be empty.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let (hp, wp) = (height + 2 * self.padding, width + 2 * self.padding);
        if hp < k || wp < k {
            return Err(shape_err(format!(
                "kernel {k} does not fit padded input {hp}x{wp}"
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    pub(crate) fn input_channel_range(&self, co: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            co..co + 1
        } else {
            0..self.in_channels
        }
    }
}

/// Stored kernel weights of shape `(out, in_or_1, K', K')` plus the `K×K`
/// base sampling lattice that lives inside the `K'×K'` scope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelScope<T = f64> {
    kernel_size: usize,
    scope_size: usize,
    weights: Tensor<T>,
}

impl<T: Real> KernelScope<T> {
    pub fn new(kernel_size: usize, scope_size: usize, weights: Tensor<T>) -> Result<Self> {
        if kernel_size == 0 || scope_size < kernel_size {
            return Err(Error::Invalid(format!(
                "scope size {scope_size} must be >= kernel size {kernel_size} >= 1"
            )));
        }
        let [_, _, h, w] = weights.dims();
        if h != scope_size || w != scope_size {
            return Err(shape_err(format!(
                "scope weights must be {scope_size}x{scope_size}, got {h}x{w}"
            )));
        }
        Ok(Self {
            kernel_size,
            scope_size,
            weights,
        })
    }

    /// A scope with `K' == K`: the stored kernel is the kernel.
    pub fn rigid(weights: Tensor<T>) -> Result<Self> {
        let k = weights.height();
        Self::new(k, k, weights)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn scope_size(&self) -> usize {
        self.scope_size
    }
    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }
    pub fn out_channels(&self) -> usize {
        self.weights.batch()
    }
    pub fn in_channels(&self) -> usize {
        self.weights.channels()
    }
    pub fn is_rigid(&self) -> bool {
        self.kernel_size == self.scope_size
    }

    /// Distance between neighbouring base lattice points, in scope cells.
    pub fn lattice_spacing(&self) -> f64 {
        if self.kernel_size == 1 {
            0.0
        } else {
            (self.scope_size - 1) as f64 / (self.kernel_size - 1) as f64
        }
    }

    /// Position of base tap `t` (row-major) in scope index space `[0, K'-1]`,
    /// returned as `(x, y)`.
    pub(crate) fn base_index(&self, t: usize) -> (f64, f64) {
        let k = self.kernel_size;
        if k == 1 {
            let c = (self.scope_size - 1) as f64 / 2.0;
            return (c, c);
        }
        let s = self.lattice_spacing();
        ((t % k) as f64 * s, (t / k) as f64 * s)
    }

    /// Half-extent `(K'-1)/2` of the scope in centered coordinates.
    pub fn half_extent(&self) -> f64 {
        (self.scope_size - 1) as f64 / 2.0
    }

    /// The `K²` base lattice points in centered scope coordinates, row-major.
    pub fn base_lattice(&self) -> Vec<Coord2> {
        let h = self.half_extent();
        (0..self.kernel_size * self.kernel_size)
            .map(|t| {
                let (x, y) = self.base_index(t);
                Coord2 { x: x - h, y: y - h }
            })
            .collect()
    }

    /// Mean over base taps of the summed squared bilinear weights. Sampled
    /// taps of i.i.d. cells have this fraction of the cell variance; it is 1
    /// when `K' = K`.
    pub fn base_gain(&self) -> f64 {
        let k2 = self.kernel_size * self.kernel_size;
        let total: f64 = (0..k2)
            .map(|t| {
                let (x, y) = self.base_index(t);
                crate::sampler::tent_taps_2d(x, y)
                    .iter()
                    .map(|tap| tap.w * tap.w)
                    .sum::<f64>()
            })
            .sum();
        total / k2 as f64
    }

    pub(crate) fn check_against(&self, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        let [o, i, _, _] = self.weights.dims();
        if self.kernel_size != spec.kernel_size {
            return Err(shape_err(format!(
                "scope kernel size {} != spec kernel size {}",
                self.kernel_size, spec.kernel_size
            )));
        }
        if o != spec.out_channels || i != spec.kernel_in_channels() {
            return Err(shape_err(format!(
                "kernel weights are {o}x{i}, spec wants {}x{}",
                spec.out_channels,
                spec.kernel_in_channels()
            )));
        }
        Ok(())
    }
}

/// Unfolds one image into `(C·K·K) × (Ho·Wo)` rows, zero where a tap falls
/// in the padding. Row order is `(ci, ky, kx)`.
pub(crate) fn im2col<T: Real>(
    item: &[T],
    spec: &ConvSpec,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let k = spec.kernel_size;
    let (s, p) = (spec.stride, spec.padding);
    let mut cols = vec![T::zero(); spec.in_channels * k * k * ho * wo];
    let mut rows = cols.chunks_exact_mut(ho * wo);
    for ci in 0..spec.in_channels {
        let plane = &item[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, s, p, ky);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(w, wo, s, p, kx);
                let row = rows.next().expect("row count matches C·K·K");
                for oy in oy0..oy1 {
                    let in_row = &plane[(oy * s + ky - p) * w..][..w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        dst[ox] = in_row[ox * s + kx - p];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates row gradients back onto the image.
fn col2im<T: Real>(
    gcols: &[T],
    spec: &ConvSpec,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    gin: &mut [T],
) {
    let k = spec.kernel_size;
    let (s, p) = (spec.stride, spec.padding);
    let mut rows = gcols.chunks_exact(ho * wo);
    for ci in 0..spec.in_channels {
        let plane = &mut gin[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, s, p, ky);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(w, wo, s, p, kx);
                let row = rows.next().expect("row count matches C·K·K");
                for oy in oy0..oy1 {
                    let g_row = &row[oy * wo..(oy + 1) * wo];
                    let in_row = &mut plane[(oy * s + ky - p) * w..][..w];
                    for ox in ox0..ox1 {
                        in_row[ox * s + kx - p] += g_row[ox];
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators, combined in a fixed
/// order so the result only depends on the inputs.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Range of output indices whose tap `k` lands inside `[0, len_in)`.
#[inline]
pub(crate) fn valid_range(
    len_in: usize,
    len_out: usize,
    stride: usize,
    pad: usize,
    k: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if len_in + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((len_in - 1 + pad - k) / stride + 1).min(len_out);
    (lo.min(hi), hi)
}

fn check_input<T: Real>(input: &Tensor<T>, spec: &ConvSpec) -> Result<(usize, usize)> {
    if input.channels() != spec.in_channels {
        return Err(shape_err(format!(
            "input has {} channels, spec expects {}",
            input.channels(),
            spec.in_channels
        )));
    }
    spec.output_size(input.height(), input.width())
}

/// Rigid convolution. Requires `K' == K`.
pub fn conv2d_rigid<T: Real>(
    input: &Tensor<T>,
    kernel: &KernelScope<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if !kernel.is_rigid() {
        return Err(Error::Invalid(
            "conv2d_rigid needs a scope with K' == K".into(),
        ));
    }
    kernel.check_against(spec)?;
    conv2d_weights(input, kernel.weights().data(), spec)
}

/// Rigid convolution on a raw `(out, in_or_1, K, K)` weight slice.
pub(crate) fn conv2d_weights<T: Real>(
    input: &Tensor<T>,
    weights: &[T],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_input(input, spec)?;
    let [n, _, h, w] = input.dims();
    let k = spec.kernel_size;
    let kin = spec.kernel_in_channels();
    if weights.len() != spec.out_channels * kin * k * k {
        return Err(shape_err("conv weights length does not match spec"));
    }
    let cout = spec.out_channels;
    let pointwise = k == 1 && spec.stride == 1 && spec.padding == 0;
    let mut out = vec![T::zero(); n * cout * ho * wo];
    if !spec.depthwise && !pointwise {
        out.par_chunks_mut(cout * ho * wo)
            .enumerate()
            .for_each(|(b, out_item)| {
                let cols = im2col(input.item(b), spec, h, w, ho, wo);
                let rows = kin * k * k;
                for (co, out_plane) in out_item.chunks_exact_mut(ho * wo).enumerate() {
                    for (r, col) in cols.chunks_exact(ho * wo).enumerate() {
                        let wv = weights[co * rows + r];
                        for (o, &c) in out_plane.iter_mut().zip(col) {
                            *o += wv * c;
                        }
                    }
                }
            });
        return Ok(Tensor::from_parts([n, cout, ho, wo], out));
    }
    out.par_chunks_mut(cout * ho * wo)
        .enumerate()
        .for_each(|(b, out_item)| {
            for (co, out_plane) in out_item.chunks_exact_mut(ho * wo).enumerate() {
                for (wi, ci) in spec.input_channel_range(co).enumerate() {
                    let in_plane = input.plane(b, ci);
                    let wbase = (co * kin + wi) * k * k;
                    if pointwise {
                        let wv = weights[wbase];
                        for (o, &i) in out_plane.iter_mut().zip(in_plane) {
                            *o += wv * i;
                        }
                        continue;
                    }
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(h, ho, spec.stride, spec.padding, ky);
                        for kx in 0..k {
                            let wv = weights[wbase + ky * k + kx];
                            let (ox0, ox1) = valid_range(w, wo, spec.stride, spec.padding, kx);
                            for oy in oy0..oy1 {
                                let iy = oy * spec.stride + ky - spec.padding;
                                let in_row = &in_plane[iy * w..(iy + 1) * w];
                                let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                                if spec.stride == 1 {
                                    let ix0 = ox0 + kx - spec.padding;
                                    for (o, &i) in out_row[ox0..ox1]
                                        .iter_mut()
                                        .zip(&in_row[ix0..ix0 + (ox1 - ox0)])
                                    {
                                        *o += wv * i;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        out_row[ox] +=
                                            wv * in_row[ox * spec.stride + kx - spec.padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts([n, cout, ho, wo], out))
}

pub fn conv2d_relu<T: Real>(
    input: &Tensor<T>,
    kernel: &KernelScope<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    Ok(relu(&conv2d_rigid(input, kernel, spec)?))
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    /// Same layout as the kernel weights, `(out, in_or_1, K, K)`.
    pub weights: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &KernelScope<T>,
    spec: &ConvSpec,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    if !kernel.is_rigid() {
        return Err(Error::Invalid(
            "conv2d_backward needs a scope with K' == K".into(),
        ));
    }
    kernel.check_against(spec)?;
    let (gi, gw) = conv2d_weights_backward(input, kernel.weights().data(), spec, upstream, true)?;
    Ok(ConvGrads {
        input: gi,
        weights: Tensor::from_parts(kernel.weights().dims(), gw),
    })
}

/// Backward on raw weights. Weight gradients are accumulated per batch item
/// and then summed in batch order, so results do not depend on thread count.
pub(crate) fn conv2d_weights_backward<T: Real>(
    input: &Tensor<T>,
    weights: &[T],
    spec: &ConvSpec,
    upstream: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (ho, wo) = check_input(input, spec)?;
    let [n, cin, h, w] = input.dims();
    let cout = spec.out_channels;
    if upstream.dims() != [n, cout, ho, wo] {
        return Err(shape_err(format!(
            "upstream dims {:?} != forward output dims {:?}",
            upstream.dims(),
            [n, cout, ho, wo]
        )));
    }
    let k = spec.kernel_size;
    let kin = spec.kernel_in_channels();
    let (s, p) = (spec.stride, spec.padding);
    let pointwise = k == 1 && s == 1 && p == 0;

    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut gin = if need_input_grad {
                vec![T::zero(); cin * h * w]
            } else {
                Vec::new()
            };
            let mut gw = vec![T::zero(); weights.len()];
            if !spec.depthwise && !pointwise {
                let cols = im2col(input.item(b), spec, h, w, ho, wo);
                let rows = kin * k * k;
                let mut gcols = if need_input_grad {
                    vec![T::zero(); cols.len()]
                } else {
                    Vec::new()
                };
                for co in 0..cout {
                    let g_plane = upstream.plane(b, co);
                    for (r, col) in cols.chunks_exact(ho * wo).enumerate() {
                        gw[co * rows + r] += dot(g_plane, col);
                    }
                    if need_input_grad {
                        for (r, gcol) in gcols.chunks_exact_mut(ho * wo).enumerate() {
                            let wv = weights[co * rows + r];
                            for (a, &g) in gcol.iter_mut().zip(g_plane) {
                                *a += wv * g;
                            }
                        }
                    }
                }
                if need_input_grad {
                    col2im(&gcols, spec, h, w, ho, wo, &mut gin);
                }
                return (gin, gw);
            }
            for co in 0..cout {
                let g_plane = upstream.plane(b, co);
                for (wi, ci) in spec.input_channel_range(co).enumerate() {
                    let in_plane = input.plane(b, ci);
                    let wbase = (co * kin + wi) * k * k;
                    if pointwise {
                        gw[wbase] += dot(g_plane, in_plane);
                        if need_input_grad {
                            let wv = weights[wbase];
                            for (a, &g) in gin[ci * h * w..(ci + 1) * h * w].iter_mut().zip(g_plane)
                            {
                                *a += g * wv;
                            }
                        }
                        continue;
                    }
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(h, ho, s, p, ky);
                        for kx in 0..k {
                            let (ox0, ox1) = valid_range(w, wo, s, p, kx);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let wv = weights[wbase + ky * k + kx];
                            let ix0 = ox0 * s + kx - p;
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let g_row = &g_plane[oy * wo + ox0..oy * wo + ox1];
                                let in_row = &in_plane[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    acc += dot(g_row, &in_row[ix0..ix0 + g_row.len()]);
                                    if need_input_grad {
                                        let gin_row =
                                            &mut gin[ci * h * w + iy * w + ix0..][..g_row.len()];
                                        for (a, &g) in gin_row.iter_mut().zip(g_row) {
                                            *a += g * wv;
                                        }
                                    }
                                } else {
                                    for (j, &g) in g_row.iter().enumerate() {
                                        acc += g * in_row[ix0 + j * s];
                                    }
                                    if need_input_grad {
                                        let gin_row = &mut gin[ci * h * w + iy * w..][..w];
                                        for (j, &g) in g_row.iter().enumerate() {
                                            gin_row[ix0 + j * s] += g * wv;
                                        }
                                    }
                                }
                            }
                            gw[wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
            (gin, gw)
        })
        .collect();

    let mut grad_w = vec![T::zero(); weights.len()];
    let mut grad_in = Vec::with_capacity(if need_input_grad { n * cin * h * w } else { 0 });
    for (gin, gw) in per_item {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
        grad_in.extend(gin);
    }
    let gi = if need_input_grad {
        Tensor::from_parts([n, cin, h, w], grad_in)
    } else {
        Tensor::from_parts([0, cin, h, w], Vec::new())
    };
    Ok((gi, grad_w))
}
