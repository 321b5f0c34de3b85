//! Runtime-adaptive convolutions.
//!
//! One engine covers all four operators:
//!
//! ```text
//! O_j = Σ_k I_{j + k + Δj} · W_{k + Δk}
//! ```
//!
//! * deformable kernel (DK): kernel offsets `Δk`, either one set per image
//!   (global) or one set per output location (local);
//! * deformable convolution (DC): data offsets `Δj` per location and tap;
//! * DC+DK: both.
//!
//! Offset tensors use `2K²` channels laid out as `(Δx, Δy)` per base tap in
//! row-major tap order. Kernel offsets are `(N, 2K², 1, 1)` (global) or
//! `(N, 2K², Ho, Wo)` (local); data offsets are always `(N, 2K², Ho, Wo)`.
//! Kernel offsets are shared by every channel of the layer.
//!
//! Data-space reads outside the input plane are zero. Accumulation order per
//! output pixel is `(input channel, tap)`, the same order as
//! [`conv2d_rigid`](crate::conv::conv2d_rigid), so zero offsets on a `K' == K`
//! scope reproduce the rigid output bit for bit.

use arrayvec::ArrayVec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_weights, conv2d_weights_backward, ConvSpec, KernelScope};
use crate::error::{shape_err, Error, Result};
use crate::sampler::{interp, scope_sample, tent_taps_2d, KernelOffsets, ScopeSample, Tap2};
use crate::tensor::{
    fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward, Real,
    Tensor,
};

/// Learning-rate multiplier applied to offset generators unless overridden.
pub const DEFAULT_GENERATOR_LR_MULTIPLIER: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KernelMode {
    Fixed,
    Global,
    Local,
}

struct Plan<'a, T> {
    input: &'a Tensor<T>,
    scope: &'a KernelScope<T>,
    spec: &'a ConvSpec,
    kernel_offsets: Option<&'a Tensor<T>>,
    data_offsets: Option<&'a Tensor<T>>,
    mode: KernelMode,
    ho: usize,
    wo: usize,
}

impl<'a, T: Real> Plan<'a, T> {
    fn new(
        input: &'a Tensor<T>,
        scope: &'a KernelScope<T>,
        spec: &'a ConvSpec,
        kernel_offsets: Option<&'a Tensor<T>>,
        data_offsets: Option<&'a Tensor<T>>,
    ) -> Result<Self> {
        scope.check_against(spec)?;
        if input.channels() != spec.in_channels {
            return Err(shape_err(format!(
                "input has {} channels, spec expects {}",
                input.channels(),
                spec.in_channels
            )));
        }
        let (ho, wo) = spec.output_size(input.height(), input.width())?;
        let n = input.batch();
        let k2 = spec.kernel_size * spec.kernel_size;
        let mode = match kernel_offsets {
            None => KernelMode::Fixed,
            Some(t) if t.dims() == [n, 2 * k2, 1, 1] => KernelMode::Global,
            Some(t) if t.dims() == [n, 2 * k2, ho, wo] => KernelMode::Local,
            Some(t) => {
                return Err(shape_err(format!(
                    "kernel offsets must be {:?} or {:?}, got {:?}",
                    [n, 2 * k2, 1, 1],
                    [n, 2 * k2, ho, wo],
                    t.dims()
                )))
            }
        };
        if let Some(d) = data_offsets {
            if d.dims() != [n, 2 * k2, ho, wo] {
                return Err(shape_err(format!(
                    "data offsets must be {:?}, got {:?}",
                    [n, 2 * k2, ho, wo],
                    d.dims()
                )));
            }
        }
        Ok(Self {
            input,
            scope,
            spec,
            kernel_offsets,
            data_offsets,
            mode,
            ho,
            wo,
        })
    }

    fn k2(&self) -> usize {
        self.spec.kernel_size * self.spec.kernel_size
    }

    /// Kernel sampling taps for item `b` at output location `loc`.
    fn kernel_samples(&self, b: usize, loc: usize, out: &mut Vec<ScopeSample<T>>) {
        out.clear();
        let k2 = self.k2();
        match (self.mode, self.kernel_offsets) {
            (KernelMode::Fixed, _) | (_, None) => {
                for t in 0..k2 {
                    out.push(scope_sample(self.scope, t, T::zero(), T::zero()));
                }
            }
            (KernelMode::Global, Some(off)) => {
                let item = off.item(b);
                for t in 0..k2 {
                    out.push(scope_sample(self.scope, t, item[2 * t], item[2 * t + 1]));
                }
            }
            (KernelMode::Local, Some(off)) => {
                let item = off.item(b);
                let plane = self.ho * self.wo;
                for t in 0..k2 {
                    out.push(scope_sample(
                        self.scope,
                        t,
                        item[2 * t * plane + loc],
                        item[(2 * t + 1) * plane + loc],
                    ));
                }
            }
        }
    }

    fn resample_into(&self, samples: &[ScopeSample<T>], kern: &mut [T]) {
        let s2 = self.scope.scope_size() * self.scope.scope_size();
        let k2 = self.k2();
        for (cell, dst) in self
            .scope
            .weights()
            .data()
            .chunks_exact(s2)
            .zip(kern.chunks_exact_mut(k2))
        {
            for (d, sample) in dst.iter_mut().zip(samples) {
                *d = interp(cell, sample);
            }
        }
    }

    /// Data sampling taps for item `b`, location `(oy, ox)`, one list per kernel tap.
    fn data_taps(&self, b: usize, oy: usize, ox: usize, out: &mut Vec<ArrayVec<Tap2<T>, 4>>) {
        out.clear();
        let k = self.spec.kernel_size;
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let base_y = oy as isize * s - p;
        let base_x = ox as isize * s - p;
        match self.data_offsets {
            None => {
                for t in 0..k * k {
                    let mut taps = ArrayVec::new();
                    taps.push(Tap2 {
                        iy: base_y + (t / k) as isize,
                        ix: base_x + (t % k) as isize,
                        w: T::one(),
                        dwx: T::zero(),
                        dwy: T::zero(),
                    });
                    out.push(taps);
                }
            }
            Some(d) => {
                let item = d.item(b);
                let plane = self.ho * self.wo;
                let loc = oy * self.wo + ox;
                for t in 0..k * k {
                    let dx = item[2 * t * plane + loc];
                    let dy = item[(2 * t + 1) * plane + loc];
                    let ux = T::from_f64((base_x + (t % k) as isize) as f64) + dx;
                    let uy = T::from_f64((base_y + (t / k) as isize) as f64) + dy;
                    out.push(tent_taps_2d(ux, uy));
                }
            }
        }
    }

    fn in_bounds(&self, tap: &Tap2<T>) -> Option<usize> {
        let (h, w) = (self.input.height() as isize, self.input.width() as isize);
        (tap.iy >= 0 && tap.iy < h && tap.ix >= 0 && tap.ix < w)
            .then(|| (tap.iy * w + tap.ix) as usize)
    }

    /// Fills `cols[ci*K² + t]` with the (possibly interpolated) input values.
    fn gather(&self, b: usize, taps: &[ArrayVec<Tap2<T>, 4>], cols: &mut [T]) {
        let k2 = self.k2();
        let item = self.input.item(b);
        let plane = self.input.plane_len();
        for (ci, col) in cols.chunks_exact_mut(k2).enumerate() {
            let src = &item[ci * plane..(ci + 1) * plane];
            for (c, tlist) in col.iter_mut().zip(taps) {
                let mut v = T::zero();
                let mut first = true;
                for tap in tlist {
                    if let Some(idx) = self.in_bounds(tap) {
                        if first {
                            v = tap.w * src[idx];
                            first = false;
                        } else {
                            v += tap.w * src[idx];
                        }
                    }
                }
                *c = v;
            }
        }
    }

    fn forward(&self) -> Tensor<T> {
        let [n, cin, _, _] = self.input.dims();
        let cout = self.spec.out_channels;
        let kin = self.spec.kernel_in_channels();
        let k2 = self.k2();
        let (ho, wo) = (self.ho, self.wo);
        let mut out = vec![T::zero(); n * cout * ho * wo];
        out.par_chunks_mut(cout * ho * wo)
            .enumerate()
            .for_each(|(b, out_item)| {
                let mut samples = Vec::with_capacity(k2);
                let mut taps = Vec::with_capacity(k2);
                let mut kern = vec![T::zero(); cout * kin * k2];
                let mut cols = vec![T::zero(); cin * k2];
                if self.mode != KernelMode::Local {
                    self.kernel_samples(b, 0, &mut samples);
                    self.resample_into(&samples, &mut kern);
                }
                for oy in 0..ho {
                    for ox in 0..wo {
                        let loc = oy * wo + ox;
                        if self.mode == KernelMode::Local {
                            self.kernel_samples(b, loc, &mut samples);
                            self.resample_into(&samples, &mut kern);
                        }
                        self.data_taps(b, oy, ox, &mut taps);
                        self.gather(b, &taps, &mut cols);
                        for co in 0..cout {
                            let mut acc = T::zero();
                            for (wi, ci) in self.spec.input_channel_range(co).enumerate() {
                                let kw = &kern[(co * kin + wi) * k2..][..k2];
                                let cv = &cols[ci * k2..][..k2];
                                for (&c, &w) in cv.iter().zip(kw) {
                                    acc += c * w;
                                }
                            }
                            out_item[co * ho * wo + loc] = acc;
                        }
                    }
                }
            });
        Tensor::from_parts([n, cout, ho, wo], out)
    }

    /// Routes `gkern` (gradient w.r.t. the resampled kernel) into scope weights
    /// and kernel offsets for one offset set.
    fn kernel_backward(
        &self,
        samples: &[ScopeSample<T>],
        gkern: &[T],
        gscope: &mut [T],
        goff: &mut [T],
    ) {
        let s2 = self.scope.scope_size() * self.scope.scope_size();
        let k2 = self.k2();
        let w = self.scope.weights().data();
        for ((cell, gcell), gk) in w
            .chunks_exact(s2)
            .zip(gscope.chunks_exact_mut(s2))
            .zip(gkern.chunks_exact(k2))
        {
            for (t, (sample, &g)) in samples.iter().zip(gk).enumerate() {
                let (mut dx, mut dy) = (T::zero(), T::zero());
                for &(idx, bw, dwx, dwy) in &sample.taps {
                    gcell[idx] += g * bw;
                    dx += cell[idx] * dwx;
                    dy += cell[idx] * dwy;
                }
                goff[2 * t] += g * dx;
                goff[2 * t + 1] += g * dy;
            }
        }
    }

    fn backward(&self, upstream: &Tensor<T>) -> Result<DeformGrads<T>> {
        let [n, cin, h, w] = self.input.dims();
        let cout = self.spec.out_channels;
        let (ho, wo) = (self.ho, self.wo);
        if upstream.dims() != [n, cout, ho, wo] {
            return Err(shape_err(format!(
                "upstream dims {:?} != forward output dims {:?}",
                upstream.dims(),
                [n, cout, ho, wo]
            )));
        }
        let kin = self.spec.kernel_in_channels();
        let k2 = self.k2();
        let plane = ho * wo;
        let scope_len = self.scope.weights().len();
        let koff_len = match self.mode {
            KernelMode::Fixed => 0,
            KernelMode::Global => 2 * k2,
            KernelMode::Local => 2 * k2 * plane,
        };
        let doff_len = if self.data_offsets.is_some() {
            2 * k2 * plane
        } else {
            0
        };

        struct ItemGrads<T> {
            input: Vec<T>,
            scope: Vec<T>,
            koff: Vec<T>,
            doff: Vec<T>,
        }

        let items: Vec<ItemGrads<T>> = (0..n)
            .into_par_iter()
            .map(|b| {
                let mut g = ItemGrads {
                    input: vec![T::zero(); cin * h * w],
                    scope: vec![T::zero(); scope_len],
                    koff: vec![T::zero(); koff_len],
                    doff: vec![T::zero(); doff_len],
                };
                let src = self.input.item(b);
                let up = upstream.item(b);
                let mut samples = Vec::with_capacity(k2);
                let mut taps = Vec::with_capacity(k2);
                let mut kern = vec![T::zero(); cout * kin * k2];
                let mut gkern = vec![T::zero(); cout * kin * k2];
                let mut cols = vec![T::zero(); cin * k2];
                let mut gcols = vec![T::zero(); cin * k2];
                let mut loc_off = vec![T::zero(); 2 * k2];
                if self.mode != KernelMode::Local {
                    self.kernel_samples(b, 0, &mut samples);
                    self.resample_into(&samples, &mut kern);
                }
                for oy in 0..ho {
                    for ox in 0..wo {
                        let loc = oy * wo + ox;
                        if self.mode == KernelMode::Local {
                            self.kernel_samples(b, loc, &mut samples);
                            self.resample_into(&samples, &mut kern);
                            gkern.iter_mut().for_each(|v| *v = T::zero());
                        }
                        self.data_taps(b, oy, ox, &mut taps);
                        self.gather(b, &taps, &mut cols);
                        gcols.iter_mut().for_each(|v| *v = T::zero());
                        for co in 0..cout {
                            let gv = up[co * plane + loc];
                            if gv == T::zero() {
                                continue;
                            }
                            for (wi, ci) in self.spec.input_channel_range(co).enumerate() {
                                let kbase = (co * kin + wi) * k2;
                                for t in 0..k2 {
                                    gcols[ci * k2 + t] += gv * kern[kbase + t];
                                    gkern[kbase + t] += gv * cols[ci * k2 + t];
                                }
                            }
                        }
                        // data path
                        for ci in 0..cin {
                            let srcp = &src[ci * h * w..(ci + 1) * h * w];
                            let gin = &mut g.input[ci * h * w..(ci + 1) * h * w];
                            for (t, tlist) in taps.iter().enumerate() {
                                let gc = gcols[ci * k2 + t];
                                if gc == T::zero() {
                                    continue;
                                }
                                for tap in tlist {
                                    if let Some(idx) = self.in_bounds(tap) {
                                        gin[idx] += gc * tap.w;
                                        if doff_len > 0 {
                                            g.doff[2 * t * plane + loc] += gc * srcp[idx] * tap.dwx;
                                            g.doff[(2 * t + 1) * plane + loc] +=
                                                gc * srcp[idx] * tap.dwy;
                                        }
                                    }
                                }
                            }
                        }
                        if self.mode == KernelMode::Local {
                            loc_off.iter_mut().for_each(|v| *v = T::zero());
                            self.kernel_backward(&samples, &gkern, &mut g.scope, &mut loc_off);
                            for (c, &v) in loc_off.iter().enumerate() {
                                g.koff[c * plane + loc] = v;
                            }
                        }
                    }
                }
                if self.mode != KernelMode::Local {
                    let mut sink = vec![T::zero(); 2 * k2];
                    let goff = if self.mode == KernelMode::Global {
                        &mut g.koff
                    } else {
                        &mut sink
                    };
                    self.kernel_backward(&samples, &gkern, &mut g.scope, goff);
                }
                g
            })
            .collect();

        let mut grad_input = Vec::with_capacity(n * cin * h * w);
        let mut grad_scope = vec![T::zero(); scope_len];
        let mut grad_koff = Vec::with_capacity(n * koff_len);
        let mut grad_doff = Vec::with_capacity(n * doff_len);
        for g in items {
            grad_input.extend(g.input);
            for (a, b) in grad_scope.iter_mut().zip(g.scope) {
                *a += b;
            }
            grad_koff.extend(g.koff);
            grad_doff.extend(g.doff);
        }
        let kernel_offsets = match self.mode {
            KernelMode::Fixed => None,
            KernelMode::Global => Some(Tensor::from_parts([n, 2 * k2, 1, 1], grad_koff)),
            KernelMode::Local => Some(Tensor::from_parts([n, 2 * k2, ho, wo], grad_koff)),
        };
        Ok(DeformGrads {
            input: Tensor::from_parts([n, cin, h, w], grad_input),
            scope: Tensor::from_parts(self.scope.weights().dims(), grad_scope),
            kernel_offsets,
            data_offsets: self
                .data_offsets
                .map(|_| Tensor::from_parts([n, 2 * k2, ho, wo], grad_doff)),
        })
    }
}

/// Gradients of the general deformable operator.
#[derive(Clone, Debug)]
pub struct DeformGrads<T> {
    pub input: Tensor<T>,
    pub scope: Tensor<T>,
    /// Same dims as the kernel offsets passed to the forward.
    pub kernel_offsets: Option<Tensor<T>>,
    pub data_offsets: Option<Tensor<T>>,
}

/// General forward: `O_j = Σ_k I_{j+k+Δj} · W_{k+Δk}`. Kernel offsets are
/// clipped to the scope; `None` means zero offsets on the base lattice.
pub fn deform_forward<T: Real>(
    input: &Tensor<T>,
    scope: &KernelScope<T>,
    spec: &ConvSpec,
    kernel_offsets: Option<&Tensor<T>>,
    data_offsets: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    Ok(Plan::new(input, scope, spec, kernel_offsets, data_offsets)?.forward())
}

pub fn deform_backward<T: Real>(
    input: &Tensor<T>,
    scope: &KernelScope<T>,
    spec: &ConvSpec,
    kernel_offsets: Option<&Tensor<T>>,
    data_offsets: Option<&Tensor<T>>,
    upstream: &Tensor<T>,
) -> Result<DeformGrads<T>> {
    Plan::new(input, scope, spec, kernel_offsets, data_offsets)?.backward(upstream)
}

/// Clips every offset set in a `(N, 2K², H, W)` kernel-offset tensor.
pub fn clip_offset_field<T: Real>(field: &Tensor<T>, scope: &KernelScope<T>) -> Result<Tensor<T>> {
    let k2 = scope.kernel_size() * scope.kernel_size();
    let [n, c, h, w] = field.dims();
    if c != 2 * k2 {
        return Err(shape_err(format!(
            "offset field needs {} channels, got {c}",
            2 * k2
        )));
    }
    let hi = T::from_f64((scope.scope_size() - 1) as f64);
    let plane = h * w;
    let mut out = field.clone();
    for b in 0..n {
        let item = out.item_mut(b);
        for t in 0..k2 {
            let (bx, by) = scope.base_index(t);
            for (ch, base) in [(2 * t, bx), (2 * t + 1, by)] {
                let base = T::from_f64(base);
                for v in &mut item[ch * plane..(ch + 1) * plane] {
                    let raw = base + *v;
                    if raw < T::zero() {
                        *v = -base;
                    } else if raw > hi {
                        *v = hi - base;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Global generator: global average pooling then an affine map `C -> 2K²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalOffsetGenerator<T = f64> {
    pub in_channels: usize,
    pub kernel_size: usize,
    /// `2K² × C`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> GlobalOffsetGenerator<T> {
    pub fn zeros(in_channels: usize, kernel_size: usize) -> Self {
        let m = 2 * kernel_size * kernel_size;
        Self {
            in_channels,
            kernel_size,
            weights: vec![T::zero(); m * in_channels],
            bias: vec![T::zero(); m],
        }
    }

    /// A generator that ignores its input and always emits `offsets`.
    pub fn constant(in_channels: usize, offsets: &KernelOffsets<T>) -> Self {
        let mut g = Self::zeros(in_channels, offsets.kernel_size());
        g.bias = offsets.values().to_vec();
        g
    }

    fn validate(&self) -> Result<()> {
        let m = 2 * self.kernel_size * self.kernel_size;
        if self.bias.len() != m || self.weights.len() != m * self.in_channels {
            return Err(shape_err(
                "global generator parameters do not match 2K^2 x C",
            ));
        }
        Ok(())
    }

    /// Raw offsets, `(N, 2K², 1, 1)`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        if input.channels() != self.in_channels {
            return Err(shape_err(
                "global generator channel count does not match input",
            ));
        }
        fully_connected(&global_avg_pool(input)?, &self.weights, &self.bias)
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, GeneratorGrads<T>)> {
        let pooled = global_avg_pool(input)?;
        let fc = fully_connected_backward(&pooled, &self.weights, upstream)?;
        let gin = global_avg_pool_backward(input.dims(), &fc.input)?;
        Ok((
            gin,
            GeneratorGrads {
                weights: fc.weights,
                bias: fc.bias,
            },
        ))
    }
}

/// Local generator: a convolution with the target's kernel size, stride and
/// padding, but `2K²` output channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalOffsetGenerator<T = f64> {
    pub spec: ConvSpec,
    /// `(2K², C, K, K)`.
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LocalOffsetGenerator<T> {
    /// Zero generator matching a target convolution.
    pub fn for_target(target: &ConvSpec) -> Result<Self> {
        let k = target.kernel_size;
        let m = 2 * k * k;
        let spec = ConvSpec::new(
            k,
            target.stride,
            target.padding,
            false,
            target.in_channels,
            m,
        )?;
        Ok(Self {
            spec,
            weights: Tensor::zeros([m, target.in_channels, k, k])?,
            bias: vec![T::zero(); m],
        })
    }

    /// Emits the same offsets at every location.
    pub fn constant(target: &ConvSpec, offsets: &KernelOffsets<T>) -> Result<Self> {
        let mut g = Self::for_target(target)?;
        if offsets.kernel_size() != target.kernel_size {
            return Err(shape_err(
                "constant offsets kernel size differs from target",
            ));
        }
        g.bias = offsets.values().to_vec();
        Ok(g)
    }

    /// Raw offsets, `(N, 2K², Ho, Wo)`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = conv2d_weights(input, self.weights.data(), &self.spec)?;
        add_channel_bias(&mut out, &self.bias);
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, GeneratorGrads<T>)> {
        let (gin, gw) =
            conv2d_weights_backward(input, self.weights.data(), &self.spec, upstream, true)?;
        Ok((
            gin,
            GeneratorGrads {
                weights: gw,
                bias: channel_sums(upstream),
            },
        ))
    }
}

pub(crate) fn add_channel_bias<T: Real>(t: &mut Tensor<T>, bias: &[T]) {
    let plane = t.plane_len();
    let c = t.channels();
    for (i, chunk) in t.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

pub(crate) fn channel_sums<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let c = t.channels();
    let mut out = vec![T::zero(); c];
    for b in 0..t.batch() {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += t.plane(b, ch).iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OffsetGenerator<T = f64> {
    Global(GlobalOffsetGenerator<T>),
    Local(LocalOffsetGenerator<T>),
}

impl<T: Real> OffsetGenerator<T> {
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Self::Global(g) => g.forward(input),
            Self::Local(g) => g.forward(input),
        }
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, GeneratorGrads<T>)> {
        match self {
            Self::Global(g) => g.backward(input, upstream),
            Self::Local(g) => g.backward(input, upstream),
        }
    }

    pub fn params(&self) -> (&[T], &[T]) {
        match self {
            Self::Global(g) => (&g.weights, &g.bias),
            Self::Local(g) => (g.weights.data(), &g.bias),
        }
    }

    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        match self {
            Self::Global(g) => (&mut g.weights, &mut g.bias),
            Self::Local(g) => (g.weights.data_mut(), &mut g.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Global DK. Returns the output and the clipped offsets used per image.
pub fn dk_forward_global<T: Real>(
    input: &Tensor<T>,
    scope: &KernelScope<T>,
    generator: &GlobalOffsetGenerator<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Vec<KernelOffsets<T>>)> {
    if generator.kernel_size != spec.kernel_size {
        return Err(shape_err("generator kernel size differs from spec"));
    }
    let raw = generator.forward(input)?;
    let out = deform_forward(input, scope, spec, Some(&raw), None)?;
    let used = clip_offset_field(&raw, scope)?;
    let per_image = (0..used.batch())
        .map(|b| KernelOffsets::new(spec.kernel_size, used.item(b).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, per_image))
}

/// Local DK. Returns the output and the clipped `(N, 2K², Ho, Wo)` offset field.
pub fn dk_forward_local<T: Real>(
    input: &Tensor<T>,
    scope: &KernelScope<T>,
    generator: &LocalOffsetGenerator<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let field = generator.forward(input)?;
    let out = deform_forward(input, scope, spec, Some(&field), None)?;
    Ok((out, clip_offset_field(&field, scope)?))
}

/// Deformable convolution with per-location, per-tap data offsets.
pub fn dc_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &KernelScope<T>,
    data_offsets: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    deform_forward(input, kernel, spec, None, Some(data_offsets))
}

/// Combined data and kernel offsets.
pub fn dcdk_forward<T: Real>(
    input: &Tensor<T>,
    scope: &KernelScope<T>,
    kernel_offsets: &Tensor<T>,
    data_offsets: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    deform_forward(input, scope, spec, Some(kernel_offsets), Some(data_offsets))
}

#[derive(Clone, Debug)]
pub struct DkGrads<T> {
    pub input: Tensor<T>,
    pub scope: Tensor<T>,
    pub generator: GeneratorGrads<T>,
}

/// Backward of a DK layer through both the sampler and its offset generator.
/// `input` receives the direct (data) gradient plus the generator path.
pub fn dk_backward<T: Real>(
    input: &Tensor<T>,
    scope: &KernelScope<T>,
    generator: &OffsetGenerator<T>,
    spec: &ConvSpec,
    upstream: &Tensor<T>,
) -> Result<DkGrads<T>> {
    let offsets = generator.forward(input)?;
    let g = deform_backward(input, scope, spec, Some(&offsets), None, upstream)?;
    let goff = g
        .kernel_offsets
        .ok_or_else(|| Error::Invalid("missing offset gradient".into()))?;
    let (gin_gen, gen) = generator.backward(input, &goff)?;
    let mut gin = g.input;
    for (a, b) in gin.data_mut().iter_mut().zip(gin_gen.data()) {
        *a += *b;
    }
    Ok(DkGrads {
        input: gin,
        scope: g.scope,
        generator: gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_backward, conv2d_rigid};
    use crate::random::{seeded_rng, uniform_tensor};
    use crate::sampler::resample_kernel;
    use crate::testutil::random_tensor;

    fn rigid_setup(seed: u64, depthwise: bool) -> (Tensor<f64>, KernelScope<f64>, ConvSpec) {
        let mut r = seeded_rng(seed);
        let c = 3;
        let spec = ConvSpec::new(3, 1, 1, depthwise, c, c).unwrap();
        let input = random_tensor(&mut r, [2, c, 6, 6]);
        let scope = KernelScope::rigid(random_tensor(&mut r, [c, spec.kernel_in_channels(), 3, 3]))
            .unwrap();
        (input, scope, spec)
    }

    #[test]
    fn zero_generators_reduce_to_rigid_bitwise() {
        for depthwise in [false, true] {
            let (input, scope, spec) = rigid_setup(1, depthwise);
            let rigid = conv2d_rigid(&input, &scope, &spec).unwrap();
            let (g, _) =
                dk_forward_global(&input, &scope, &GlobalOffsetGenerator::zeros(3, 3), &spec)
                    .unwrap();
            assert_eq!(g, rigid);
            let (l, _) = dk_forward_local(
                &input,
                &scope,
                &LocalOffsetGenerator::for_target(&spec).unwrap(),
                &spec,
            )
            .unwrap();
            assert_eq!(l, rigid);
            let zeros = Tensor::zeros([2, 18, 6, 6]).unwrap();
            assert_eq!(dc_forward(&input, &scope, &zeros, &spec).unwrap(), rigid);
            assert_eq!(
                dcdk_forward(&input, &scope, &zeros, &zeros, &spec).unwrap(),
                rigid
            );
        }
    }

    #[test]
    fn zero_generator_on_larger_scope_uses_base_lattice_kernel() {
        let mut r = seeded_rng(2);
        let spec = ConvSpec::new(3, 1, 1, true, 2, 2).unwrap();
        let input = random_tensor(&mut r, [1, 2, 5, 5]);
        let scope = KernelScope::new(3, 4, random_tensor(&mut r, [2, 1, 4, 4])).unwrap();
        let (out, used) =
            dk_forward_global(&input, &scope, &GlobalOffsetGenerator::zeros(2, 3), &spec).unwrap();
        let base =
            KernelScope::rigid(resample_kernel(&scope, &KernelOffsets::zeros(3)).unwrap()).unwrap();
        assert_eq!(out, conv2d_rigid(&input, &base, &spec).unwrap());
        assert_eq!(used[0], KernelOffsets::zeros(3));
    }

    #[test]
    fn injected_global_offsets_compose() {
        let mut r = seeded_rng(3);
        let spec = ConvSpec::new(3, 2, 1, false, 2, 3).unwrap();
        let input = random_tensor(&mut r, [1, 2, 7, 7]);
        let scope = KernelScope::new(3, 4, random_tensor(&mut r, [3, 2, 4, 4])).unwrap();
        let off = KernelOffsets::new(
            3,
            uniform_tensor::<f64>(&mut r, [1, 1, 1, 18], -0.7, 0.7).into_vec(),
        )
        .unwrap();
        let (out, _) = dk_forward_global(
            &input,
            &scope,
            &GlobalOffsetGenerator::constant(2, &off),
            &spec,
        )
        .unwrap();
        let k = KernelScope::rigid(resample_kernel(&scope, &off).unwrap()).unwrap();
        let expected = conv2d_rigid(&input, &k, &spec).unwrap();
        assert!(out.max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn global_is_per_image() {
        let mut r = seeded_rng(4);
        let spec = ConvSpec::new(3, 1, 1, true, 2, 2).unwrap();
        let input = random_tensor(&mut r, [2, 2, 5, 5]);
        let scope = KernelScope::new(3, 4, random_tensor(&mut r, [2, 1, 4, 4])).unwrap();
        let mut gen = GlobalOffsetGenerator::zeros(2, 3);
        gen.weights = uniform_tensor::<f64>(&mut r, [1, 1, 1, 36], -0.8, 0.8).into_vec();
        let (both, used) = dk_forward_global(&input, &scope, &gen, &spec).unwrap();
        assert_ne!(used[0], used[1]);
        for b in 0..2 {
            let (single, _) = dk_forward_global(&input.slice_item(b), &scope, &gen, &spec).unwrap();
            assert_eq!(single.item(0), both.item(b));
        }
    }

    #[test]
    fn constant_local_field_equals_global() {
        let mut r = seeded_rng(5);
        let spec = ConvSpec::new(3, 1, 1, true, 2, 2).unwrap();
        let input = random_tensor(&mut r, [1, 2, 6, 6]);
        let scope = KernelScope::new(3, 4, random_tensor(&mut r, [2, 1, 4, 4])).unwrap();
        let off = KernelOffsets::new(
            3,
            uniform_tensor::<f64>(&mut r, [1, 1, 1, 18], -0.6, 0.6).into_vec(),
        )
        .unwrap();
        let (g, _) = dk_forward_global(
            &input,
            &scope,
            &GlobalOffsetGenerator::constant(2, &off),
            &spec,
        )
        .unwrap();
        let (l, _) = dk_forward_local(
            &input,
            &scope,
            &LocalOffsetGenerator::constant(&spec, &off).unwrap(),
            &spec,
        )
        .unwrap();
        assert!(g.max_abs_diff(&l) <= 1e-12);
    }

    #[test]
    fn local_matches_naive_per_pixel_loop() {
        let mut r = seeded_rng(6);
        let spec = ConvSpec::new(3, 1, 1, true, 2, 2).unwrap();
        let input = random_tensor(&mut r, [1, 2, 6, 6]);
        let scope = KernelScope::new(3, 4, random_tensor(&mut r, [2, 1, 4, 4])).unwrap();
        let field = uniform_tensor::<f64>(&mut r, [1, 18, 6, 6], -1.0, 1.0);
        let out = deform_forward(&input, &scope, &spec, Some(&field), None).unwrap();
        for oy in 0..6 {
            for ox in 0..6 {
                let offs: Vec<f64> = (0..18).map(|c| field.get(0, c, oy, ox)).collect();
                let kern = resample_kernel(&scope, &KernelOffsets::new(3, offs).unwrap()).unwrap();
                for c in 0..2 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) =
                                (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                acc += input.get(0, c, iy as usize, ix as usize)
                                    * kern.get(c, 0, ky, kx);
                            }
                        }
                    }
                    assert_eq!(out.get(0, c, oy, ox), acc);
                }
            }
        }
    }

    #[test]
    fn integer_data_shift_matches_shifted_rigid_conv() {
        let mut r = seeded_rng(7);
        let spec = ConvSpec::same(3, false, 1, 1).unwrap();
        let input = random_tensor(&mut r, [1, 1, 8, 8]);
        let scope = KernelScope::rigid(random_tensor(&mut r, [1, 1, 3, 3])).unwrap();
        let mut doff = Tensor::zeros([1, 18, 8, 8]).unwrap();
        for t in 0..9 {
            doff.plane_mut(0, 2 * t).iter_mut().for_each(|v| *v = 1.0);
        }
        let dc = dc_forward(&input, &scope, &doff, &spec).unwrap();
        // Shift image left by one column: shifted[x] = input[x + 1].
        let mut shifted = Tensor::zeros([1, 1, 8, 8]).unwrap();
        for y in 0..8 {
            for x in 0..7 {
                shifted.set(0, 0, y, x, input.get(0, 0, y, x + 1));
            }
        }
        let rigid = conv2d_rigid(&shifted, &scope, &spec).unwrap();
        for y in 1..7 {
            for x in 1..6 {
                assert!((dc.get(0, 0, y, x) - rigid.get(0, 0, y, x)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        // I(y, x) = 2x + 3y is linear, so bilinear sampling is exact.
        let input = Tensor::from_vec(
            [1, 1, 6, 6],
            (0..36)
                .map(|i| 2.0 * (i % 6) as f64 + 3.0 * (i / 6) as f64)
                .collect(),
        )
        .unwrap();
        let mut kw = vec![0.0; 9];
        kw[4] = 1.0;
        let scope = KernelScope::rigid(Tensor::from_vec([1, 1, 3, 3], kw).unwrap()).unwrap();
        let spec = ConvSpec::same(3, false, 1, 1).unwrap();
        let mut doff = Tensor::zeros([1, 18, 6, 6]).unwrap();
        doff.plane_mut(0, 8).iter_mut().for_each(|v| *v = 0.5);
        let out = dc_forward(&input, &scope, &doff, &spec).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                let midpoint = (input.get(0, 0, y, x) + input.get(0, 0, y, x + 1)) / 2.0;
                assert_eq!(out.get(0, 0, y, x), midpoint);
            }
        }
    }

    #[test]
    fn dcdk_reductions() {
        let mut r = seeded_rng(8);
        let spec = ConvSpec::new(3, 1, 1, true, 2, 2).unwrap();
        let input = random_tensor(&mut r, [1, 2, 6, 6]);
        let scope = KernelScope::new(3, 4, random_tensor(&mut r, [2, 1, 4, 4])).unwrap();
        let koff = uniform_tensor::<f64>(&mut r, [1, 18, 6, 6], -0.9, 0.9);
        let doff = uniform_tensor::<f64>(&mut r, [1, 18, 6, 6], -1.5, 1.5);
        let zeros = Tensor::zeros([1, 18, 6, 6]).unwrap();
        let dk = deform_forward(&input, &scope, &spec, Some(&koff), None).unwrap();
        assert_eq!(
            dcdk_forward(&input, &scope, &koff, &zeros, &spec).unwrap(),
            dk
        );
        let rscope = KernelScope::rigid(random_tensor(&mut r, [2, 1, 3, 3])).unwrap();
        let dc = dc_forward(&input, &rscope, &doff, &spec).unwrap();
        assert_eq!(
            dcdk_forward(&input, &rscope, &zeros, &doff, &spec).unwrap(),
            dc
        );
    }

    #[test]
    fn backward_zero_upstream_and_degeneracy() {
        let (input, scope, spec) = rigid_setup(9, true);
        let gen = OffsetGenerator::Local(LocalOffsetGenerator::for_target(&spec).unwrap());
        let zero = Tensor::zeros([2, 3, 6, 6]).unwrap();
        let g = dk_backward(&input, &scope, &gen, &spec, &zero).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.scope.data())
            .all(|&v| v == 0.0));
        assert!(g
            .generator
            .weights
            .iter()
            .chain(&g.generator.bias)
            .all(|&v| v == 0.0));

        let mut r = seeded_rng(10);
        let up = random_tensor(&mut r, [2, 3, 6, 6]);
        let g = dk_backward(&input, &scope, &gen, &spec, &up).unwrap();
        let c = conv2d_backward(&input, &scope, &spec, &up).unwrap();
        assert!(g.input.max_abs_diff(&c.input) <= 1e-13);
        assert!(g.scope.max_abs_diff(&c.weights) <= 1e-13);
    }

    #[test]
    fn shape_errors() {
        let (input, scope, spec) = rigid_setup(11, true);
        let bad = Tensor::zeros([2, 18, 5, 5]).unwrap();
        assert!(deform_forward(&input, &scope, &spec, Some(&bad), None).is_err());
        assert!(dc_forward(&input, &scope, &bad, &spec).is_err());
        assert!(
            dk_forward_global(&input, &scope, &GlobalOffsetGenerator::zeros(2, 3), &spec).is_err()
        );
    }

    #[test]
    fn generator_dimensionality() {
        let spec = ConvSpec::same(3, true, 4, 4).unwrap();
        assert_eq!(
            LocalOffsetGenerator::<f64>::for_target(&spec)
                .unwrap()
                .spec
                .out_channels,
            18
        );
        assert_eq!(GlobalOffsetGenerator::<f64>::zeros(4, 3).bias.len(), 18);
    }
}
