//! Dense rank-4 tensors in row-major (N, C, H, W) order and the handful of
//! elementwise and reduction primitives the operators are built from.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Floating-point element type. `f64` is the default everywhere; `f32` is
/// used by the training harness when speed matters more than tight
/// tolerances.
pub trait Real:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// `(batch, channels, height, width)`.
pub type Dims = [usize; 4];

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn checked_len(dims: Dims) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::SizeOverflow(dims))
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Dims, fill: T) -> Result<Self> {
        let len = checked_len(dims)?;
        Ok(Self {
            dims,
            data: vec![fill; len],
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, T::zero())
    }

    /// Builds a tensor from external data, rejecting NaN and infinities.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let len = checked_len(dims)?;
        if data.len() != len {
            return Err(shape_err(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for operator outputs whose length is known to be right.
    pub(crate) fn from_parts(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// The `H×W` plane for batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.dims[1] * self.plane_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.dims[1] * self.plane_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// A single-item tensor holding a copy of batch item `n`.
    pub fn slice_item(&self, n: usize) -> Tensor<T> {
        let [_, c, h, w] = self.dims;
        Tensor::from_parts([1, c, h, w], self.item(n).to_vec())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.dims,
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on mismatched dims.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("stack of zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(shape_err(format!(
                    "stack: {:?} vs {:?}",
                    t.dims, first.dims
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.dims[0]).sum();
        Ok(Tensor::from_parts([n, c, h, w], data))
    }
}

/// A continuous 2-D coordinate in kernel or data space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coord2 {
    pub x: f64,
    pub y: f64,
}

impl Coord2 {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::NonFinite("coordinate"));
        }
        Ok(Self { x, y })
    }
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of `relu` given its input: passes `upstream` where `input > 0`.
pub fn relu_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.dims != upstream.dims {
        return Err(shape_err("relu_backward: upstream dims differ from input"));
    }
    let data = input
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(input.dims, data))
}

pub fn global_avg_pool<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims;
    if h == 0 || w == 0 {
        return Err(shape_err("global_avg_pool over an empty spatial plane"));
    }
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let s = t.plane(b, ch).iter().fold(T::zero(), |acc, &v| acc + v);
            out.push(s * inv);
        }
    }
    Ok(Tensor::from_parts([n, c, 1, 1], out))
}

/// Spreads a pooled gradient `(N,C,1,1)` uniformly back over `(N,C,H,W)`.
pub fn global_avg_pool_backward<T: Real>(
    input_dims: Dims,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_dims;
    if upstream.dims != [n, c, 1, 1] {
        return Err(shape_err(
            "global_avg_pool_backward: upstream must be (N,C,1,1)",
        ));
    }
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in &upstream.data {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Ok(Tensor::from_parts(input_dims, data))
}

/// Affine map `(N,C,1,1) -> (N,M,1,1)`; `weights` is `M×C` row-major and
/// `M == bias.len()`.
pub fn fully_connected<T: Real>(t: &Tensor<T>, weights: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims;
    let m = bias.len();
    if h != 1 || w != 1 {
        return Err(shape_err(format!(
            "fully_connected expects (N,C,1,1), got {:?}",
            t.dims
        )));
    }
    if weights.len() != m * c {
        return Err(shape_err(format!(
            "fully_connected: weights have {} entries, expected {m}x{c}",
            weights.len()
        )));
    }
    let mut out = Vec::with_capacity(n * m);
    for b in 0..n {
        let x = t.item(b);
        for (row, &bi) in weights.chunks_exact(c).zip(bias) {
            let dot = row
                .iter()
                .zip(x)
                .fold(T::zero(), |acc, (&wv, &xv)| acc + wv * xv);
            out.push(dot + bi);
        }
    }
    Ok(Tensor::from_parts([n, m, 1, 1], out))
}

pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub fn fully_connected_backward<T: Real>(
    t: &Tensor<T>,
    weights: &[T],
    upstream: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let [n, c, _, _] = t.dims;
    let m = upstream.channels();
    if upstream.dims != [n, m, 1, 1] || weights.len() != m * c {
        return Err(shape_err("fully_connected_backward: shape mismatch"));
    }
    let mut gin = vec![T::zero(); n * c];
    let mut gw = vec![T::zero(); m * c];
    let mut gb = vec![T::zero(); m];
    for b in 0..n {
        let x = t.item(b);
        let g = upstream.item(b);
        let gx = &mut gin[b * c..(b + 1) * c];
        for o in 0..m {
            let go = g[o];
            gb[o] += go;
            let row = &weights[o * c..(o + 1) * c];
            let grow = &mut gw[o * c..(o + 1) * c];
            for i in 0..c {
                grow[i] += go * x[i];
                gx[i] += go * row[i];
            }
        }
    }
    Ok(FcGrads {
        input: Tensor::from_parts(t.dims, gin),
        weights: gw,
        bias: gb,
    })
}
