//! Bilinear sampling in kernel space.
//!
//! The tent operator `B(a, k') = max(0, 1-|a_x-k'_x|) · max(0, 1-|a_y-k'_y|)`
//! interpolates stored values at a continuous coordinate. The same operator
//! is reused for data-space sampling in [`crate::deform`].
//!
//! Derivatives follow the piecewise rule `∂B/∂a_x = tent_y · (+1 if a_x < k'_x,
//! -1 if a_x >= k'_x, 0 if |a_x-k'_x| >= 1)`, so at a kink the `-1` branch is
//! taken. Coordinates that had to be clipped back into the scope get a zero
//! offset gradient.

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::conv::KernelScope;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Coord2, Real, Tensor};

/// `B(a, k')` for continuous `a` and lattice point `k'`.
pub fn bilinear_weight(a: Coord2, lattice: Coord2) -> f64 {
    (1.0 - (a.x - lattice.x).abs()).max(0.0) * (1.0 - (a.y - lattice.y).abs()).max(0.0)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap1<T> {
    pub idx: isize,
    pub w: T,
    pub dw: T,
}

/// Lattice points within distance `< 1` of `u` (integer lattice), with tent
/// weight and derivative. At most two; exactly one when `u` is an integer.
#[inline]
pub(crate) fn tent_taps_1d<T: Real>(u: T) -> ArrayVec<Tap1<T>, 2> {
    let f = u.floor();
    let i0 = f.to_isize().expect("finite coordinate");
    let d = u - f;
    let mut taps = ArrayVec::new();
    // u >= i0, so the -1 branch applies at i0.
    taps.push(Tap1 {
        idx: i0,
        w: T::one() - d,
        dw: -T::one(),
    });
    if d > T::zero() {
        taps.push(Tap1 {
            idx: i0 + 1,
            w: d,
            dw: T::one(),
        });
    }
    taps
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap2<T> {
    pub iy: isize,
    pub ix: isize,
    pub w: T,
    pub dwx: T,
    pub dwy: T,
}

#[inline]
pub(crate) fn tent_taps_2d<T: Real>(ux: T, uy: T) -> ArrayVec<Tap2<T>, 4> {
    let tx = tent_taps_1d(ux);
    let ty = tent_taps_1d(uy);
    let mut out = ArrayVec::new();
    for y in &ty {
        for x in &tx {
            out.push(Tap2 {
                iy: y.idx,
                ix: x.idx,
                w: x.w * y.w,
                dwx: x.dw * y.w,
                dwy: x.w * y.dw,
            });
        }
    }
    out
}

/// Taps of one sampled kernel position: flat scope cell index, weight and
/// derivative weights (already zeroed on clipped axes).
#[derive(Clone, Debug, Default)]
pub(crate) struct ScopeSample<T> {
    pub taps: ArrayVec<(usize, T, T, T), 4>,
}

/// Sampling taps for base point `t` moved by `(dx, dy)`, clipped to the scope.
#[inline]
pub(crate) fn scope_sample<T: Real>(
    scope: &KernelScope<T>,
    t: usize,
    dx: T,
    dy: T,
) -> ScopeSample<T> {
    let (bx, by) = scope.base_index(t);
    let hi = T::from_f64((scope.scope_size() - 1) as f64);
    let rx = T::from_f64(bx) + dx;
    let ry = T::from_f64(by) + dy;
    let ux = rx.max(T::zero()).min(hi);
    let uy = ry.max(T::zero()).min(hi);
    let (clip_x, clip_y) = (ux != rx, uy != ry);
    let s = scope.scope_size();
    let mut out = ScopeSample::default();
    for tap in tent_taps_2d(ux, uy) {
        let dwx = if clip_x { T::zero() } else { tap.dwx };
        let dwy = if clip_y { T::zero() } else { tap.dwy };
        out.taps
            .push((tap.iy as usize * s + tap.ix as usize, tap.w, dwx, dwy));
    }
    out
}

/// All `K²` samples for one offset set (`2K²` values, `(dx, dy)` per tap).
pub(crate) fn scope_samples<T: Real>(scope: &KernelScope<T>, offsets: &[T]) -> Vec<ScopeSample<T>> {
    (0..scope.kernel_size() * scope.kernel_size())
        .map(|t| scope_sample(scope, t, offsets[2 * t], offsets[2 * t + 1]))
        .collect()
}

/// Kernel offsets `(Δk_x, Δk_y)` per base lattice point, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelOffsets<T = f64> {
    kernel_size: usize,
    values: Vec<T>,
}

impl<T: Real> KernelOffsets<T> {
    pub fn new(kernel_size: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != 2 * kernel_size * kernel_size {
            return Err(shape_err(format!(
                "kernel offsets need 2K^2 = {} values, got {}",
                2 * kernel_size * kernel_size,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel offsets"));
        }
        Ok(Self {
            kernel_size,
            values,
        })
    }

    pub fn zeros(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            values: vec![T::zero(); 2 * kernel_size * kernel_size],
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// `(Δk_x, Δk_y)` of base tap `t`.
    pub fn get(&self, t: usize) -> (T, T) {
        (self.values[2 * t], self.values[2 * t + 1])
    }

    pub fn mean_abs(&self) -> T {
        let n = T::from_f64(self.values.len() as f64);
        self.values.iter().fold(T::zero(), |a, v| a + v.abs()) / n
    }
}

fn check_offsets<T: Real>(offsets: &KernelOffsets<T>, scope: &KernelScope<T>) -> Result<()> {
    if offsets.kernel_size != scope.kernel_size() {
        return Err(shape_err(format!(
            "offsets are for K={}, scope has K={}",
            offsets.kernel_size,
            scope.kernel_size()
        )));
    }
    Ok(())
}

/// Clamps every sampled coordinate `k + Δk` into `[-(K'-1)/2, (K'-1)/2]` per axis.
pub fn clip_offsets<T: Real>(
    offsets: &KernelOffsets<T>,
    scope: &KernelScope<T>,
) -> Result<KernelOffsets<T>> {
    check_offsets(offsets, scope)?;
    let hi = T::from_f64((scope.scope_size() - 1) as f64);
    let mut values = offsets.values.clone();
    for t in 0..scope.kernel_size() * scope.kernel_size() {
        let (bx, by) = scope.base_index(t);
        for (slot, base) in [(2 * t, bx), (2 * t + 1, by)] {
            let base = T::from_f64(base);
            let raw = base + values[slot];
            if raw < T::zero() {
                values[slot] = -base;
            } else if raw > hi {
                values[slot] = hi - base;
            }
        }
    }
    Ok(KernelOffsets {
        kernel_size: offsets.kernel_size,
        values,
    })
}

/// `W'_k = Σ_{k'} B(k + Δk, k') W_{k'}` for every `(out, in)` channel pair.
/// Offsets are clipped internally. Returns `(out, in_or_1, K, K)`.
pub fn resample_kernel<T: Real>(
    scope: &KernelScope<T>,
    offsets: &KernelOffsets<T>,
) -> Result<Tensor<T>> {
    check_offsets(offsets, scope)?;
    let samples = scope_samples(scope, &offsets.values);
    Ok(resample_with(scope, &samples))
}

pub(crate) fn resample_with<T: Real>(
    scope: &KernelScope<T>,
    samples: &[ScopeSample<T>],
) -> Tensor<T> {
    let [o, i, s, _] = scope.weights().dims();
    let k = scope.kernel_size();
    let w = scope.weights().data();
    let mut out = Vec::with_capacity(o * i * k * k);
    for cell in w.chunks_exact(s * s) {
        for sample in samples {
            out.push(interp(cell, sample));
        }
    }
    Tensor::from_parts([o, i, k, k], out)
}

#[inline]
pub(crate) fn interp<T: Real>(cell: &[T], sample: &ScopeSample<T>) -> T {
    let mut taps = sample.taps.iter();
    let &(i0, w0, _, _) = taps.next().expect("at least one tap");
    let mut v = w0 * cell[i0];
    for &(idx, w, _, _) in taps {
        v += w * cell[idx];
    }
    v
}

/// How an input patch's channels line up with the scope's `(out, in)` pairs.
fn patch_layout<T: Real>(scope: &KernelScope<T>, patch: &Tensor<T>) -> Result<bool> {
    let k = scope.kernel_size();
    let [_, c, h, w] = patch.dims();
    if h != k || w != k || patch.batch() != 1 {
        return Err(shape_err(format!(
            "input patch must be (1, C, {k}, {k}), got {:?}",
            patch.dims()
        )));
    }
    if c == scope.in_channels() {
        Ok(false)
    } else if scope.in_channels() == 1 && c == scope.out_channels() {
        Ok(true)
    } else {
        Err(shape_err(
            "input patch channels match neither a general nor a depthwise scope",
        ))
    }
}

/// Gradient of `Σ_co upstream[co] · O_co` at one output location w.r.t. each
/// `(Δk_x, Δk_y)`, where `O_co = Σ_{ci,k} patch[ci,k] · W'[co,ci,k]`.
pub fn sampler_grad_offsets<T: Real>(
    scope: &KernelScope<T>,
    offsets: &KernelOffsets<T>,
    input_patch: &Tensor<T>,
    upstream: &[T],
) -> Result<Vec<T>> {
    check_offsets(offsets, scope)?;
    let depthwise = patch_layout(scope, input_patch)?;
    if upstream.len() != scope.out_channels() {
        return Err(shape_err("upstream length must equal scope out channels"));
    }
    let k2 = scope.kernel_size() * scope.kernel_size();
    let s2 = scope.scope_size() * scope.scope_size();
    let samples = scope_samples(scope, &offsets.values);
    let w = scope.weights().data();
    let mut grad = vec![T::zero(); 2 * k2];
    for (co, &g) in upstream.iter().enumerate() {
        for wi in 0..scope.in_channels() {
            let ci = if depthwise { co } else { wi };
            let cell = &w[(co * scope.in_channels() + wi) * s2..][..s2];
            let patch = &input_patch.item(0)[ci * k2..(ci + 1) * k2];
            for (t, sample) in samples.iter().enumerate() {
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for &(idx, _, dwx, dwy) in &sample.taps {
                    gx += cell[idx] * dwx;
                    gy += cell[idx] * dwy;
                }
                grad[2 * t] += g * patch[t] * gx;
                grad[2 * t + 1] += g * patch[t] * gy;
            }
        }
    }
    Ok(grad)
}

/// Gradient of the same scalar w.r.t. the stored scope weights:
/// `∂/∂W_{k'} = Σ_k patch[k] · B(k+Δk, k') · upstream`.
pub fn sampler_grad_weights<T: Real>(
    scope: &KernelScope<T>,
    offsets: &KernelOffsets<T>,
    input_patch: &Tensor<T>,
    upstream: &[T],
) -> Result<Tensor<T>> {
    check_offsets(offsets, scope)?;
    let depthwise = patch_layout(scope, input_patch)?;
    if upstream.len() != scope.out_channels() {
        return Err(shape_err("upstream length must equal scope out channels"));
    }
    let k2 = scope.kernel_size() * scope.kernel_size();
    let s2 = scope.scope_size() * scope.scope_size();
    let samples = scope_samples(scope, &offsets.values);
    let mut grad = vec![T::zero(); scope.weights().len()];
    for (co, &g) in upstream.iter().enumerate() {
        for wi in 0..scope.in_channels() {
            let ci = if depthwise { co } else { wi };
            let cell = &mut grad[(co * scope.in_channels() + wi) * s2..][..s2];
            let patch = &input_patch.item(0)[ci * k2..(ci + 1) * k2];
            for (t, sample) in samples.iter().enumerate() {
                for &(idx, bw, _, _) in &sample.taps {
                    cell[idx] += g * patch[t] * bw;
                }
            }
        }
    }
    Ok(Tensor::from_parts(scope.weights().dims(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded_rng;
    use crate::testutil::random_tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn scope_2x2() -> KernelScope<f64> {
        KernelScope::new(
            1,
            2,
            Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_offsets_reproduce_rigid_kernel_exactly() {
        let mut r = seeded_rng(2);
        let w = random_tensor(&mut r, [2, 3, 3, 3]);
        let scope = KernelScope::rigid(w.clone()).unwrap();
        let out = resample_kernel(&scope, &KernelOffsets::zeros(3)).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn center_of_2x2_scope_averages() {
        // K=1 places the single base point at the scope center.
        let out = resample_kernel(&scope_2x2(), &KernelOffsets::zeros(1)).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn sample_on_stored_point() {
        // Move the center (0.5, 0.5) onto cell (row 1, col 0), which holds 3.
        let off = KernelOffsets::new(1, vec![-0.5, 0.5]).unwrap();
        assert_eq!(resample_kernel(&scope_2x2(), &off).unwrap().data(), &[3.0]);
    }

    #[test]
    fn clip_cases() {
        let w = Tensor::<f64>::zeros([1, 1, 4, 4]).unwrap();
        let scope = KernelScope::new(1, 4, w).unwrap();
        let inside = KernelOffsets::new(1, vec![0.3, -1.2]).unwrap();
        assert_eq!(clip_offsets(&inside, &scope).unwrap(), inside);
        // Base point sits at the center (0, 0); +10 clamps to +1.5.
        let far = KernelOffsets::new(1, vec![10.0, 0.0]).unwrap();
        let clipped = clip_offsets(&far, &scope).unwrap();
        let at = scope.base_lattice()[0].x + clipped.values()[0];
        assert_eq!(at, 1.5);
        let on_bound = KernelOffsets::new(1, vec![1.5, -1.5]).unwrap();
        assert_eq!(clip_offsets(&on_bound, &scope).unwrap(), on_bound);
    }

    #[test]
    fn offset_gradient_at_center_by_hand() {
        let patch = Tensor::new([1, 1, 1, 1], 1.0).unwrap();
        let g =
            sampler_grad_offsets(&scope_2x2(), &KernelOffsets::zeros(1), &patch, &[1.0]).unwrap();
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1], 2.0);
    }

    #[test]
    fn constant_scope_has_zero_offset_gradient() {
        let scope = KernelScope::new(3, 4, Tensor::new([1, 1, 4, 4], 0.7).unwrap()).unwrap();
        let off =
            KernelOffsets::new(3, (0..18).map(|i| 0.1 + 0.013 * i as f64 - 0.2).collect()).unwrap();
        let patch = Tensor::new([1, 1, 3, 3], 1.3).unwrap();
        let g = sampler_grad_offsets(&scope, &off, &patch, &[1.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn weight_gradient_zero_upstream_and_rigid_case() {
        let mut r = seeded_rng(4);
        let scope = KernelScope::rigid(random_tensor(&mut r, [2, 1, 3, 3])).unwrap();
        let patch = random_tensor(&mut r, [1, 2, 3, 3]);
        let z =
            sampler_grad_weights(&scope, &KernelOffsets::zeros(3), &patch, &[0.0, 0.0]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        // Depthwise, zero offsets: gradient is upstream * patch, tap for tap.
        let g =
            sampler_grad_weights(&scope, &KernelOffsets::zeros(3), &patch, &[2.0, -1.0]).unwrap();
        for c in 0..2 {
            let u = [2.0, -1.0][c];
            for t in 0..9 {
                assert_eq!(g.get(c, 0, t / 3, t % 3), u * patch.get(0, c, t / 3, t % 3));
            }
        }
    }

    #[test]
    fn clipped_axis_has_zero_gradient() {
        let mut r = seeded_rng(8);
        let scope = KernelScope::new(1, 4, random_tensor(&mut r, [1, 1, 4, 4])).unwrap();
        let off = KernelOffsets::new(1, vec![5.0, 0.3]).unwrap();
        let patch = Tensor::new([1, 1, 1, 1], 1.0).unwrap();
        let g = sampler_grad_offsets(&scope, &off, &patch, &[1.0]).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0);
    }

    #[test]
    fn kink_uses_minus_one_branch() {
        // Exactly on stored point 2 (value 3): d/dx picks -W[k'] only.
        let scope = KernelScope::new(
            1,
            3,
            Tensor::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap(),
        )
        .unwrap();
        let patch = Tensor::new([1, 1, 1, 1], 1.0).unwrap();
        let g = sampler_grad_offsets(&scope, &KernelOffsets::zeros(1), &patch, &[1.0]).unwrap();
        assert_eq!(g, vec![-5.0, -5.0]);
    }

    #[test]
    fn locality_and_partition_of_unity() {
        let mut r = seeded_rng(13);
        let s = 5usize;
        let h = (s - 1) as f64 / 2.0;
        for _ in 0..2000 {
            let a = Coord2::new(r.random_range(-h..=h), r.random_range(-h..=h)).unwrap();
            let mut sum = 0.0;
            let mut nonzero = 0;
            for iy in 0..s {
                for ix in 0..s {
                    let p = Coord2 {
                        x: ix as f64 - h,
                        y: iy as f64 - h,
                    };
                    let b = bilinear_weight(a, p);
                    if (a.x - p.x).abs() >= 1.0 || (a.y - p.y).abs() >= 1.0 {
                        assert_eq!(b, 0.0);
                    }
                    if b != 0.0 {
                        nonzero += 1;
                    }
                    sum += b;
                }
            }
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(nonzero <= 4);
        }
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent(vals in proptest::collection::vec(-6.0f64..6.0, 18), scope_size in 3usize..8) {
            let scope = KernelScope::new(3, scope_size, Tensor::zeros([1, 1, scope_size, scope_size]).unwrap()).unwrap();
            let off = KernelOffsets::new(3, vals).unwrap();
            let once = clip_offsets(&off, &scope).unwrap();
            prop_assert_eq!(clip_offsets(&once, &scope).unwrap(), once.clone());
            let h = scope.half_extent();
            for (t, b) in scope.base_lattice().iter().enumerate() {
                let (dx, dy) = once.get(t);
                prop_assert!((b.x + dx).abs() <= h + 1e-12 && (b.y + dy).abs() <= h + 1e-12);
            }
        }

        #[test]
        fn constant_scope_resamples_to_constant(c in -5.0f64..5.0, vals in proptest::collection::vec(-3.0f64..3.0, 18)) {
            let scope = KernelScope::new(3, 4, Tensor::new([1, 1, 4, 4], c).unwrap()).unwrap();
            let out = resample_kernel(&scope, &KernelOffsets::new(3, vals).unwrap()).unwrap();
            for v in out.data() {
                prop_assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0));
            }
        }
    }
}
