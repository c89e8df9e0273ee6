//! Dense-tensor kernel layer: the rank-4 feature map carrier plus the
//! deterministic numeric primitives everything else is built from.
//!
//! All routines here are pure functions; values are immutable after
//! construction and safe to share across threads. Storage precision follows
//! the scalar parameter, accumulation is always f64.

pub(crate) mod conv;
mod fft;
mod ops;
mod resize;

pub use conv::conv2d;
pub use fft::{fft2, ifft2_real};
pub use ops::cosine;
pub use resize::bilinear_resize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense rank-4 real tensor in row-major `(batch, channel, height, width)`
/// order. The universal carrier for images, activations and score grids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    data: Vec<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("feature map dims must be positive, got {n}x{c}x{h}x{w}")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite entry {bad} in feature map")));
        }
        Ok(Self { data, n, c, h, w })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { data: vec![T::zero(); n * c * h * w], n, c, h, w }
    }

    pub fn constant(n: usize, c: usize, h: usize, w: usize, v: T) -> Self {
        Self { data: vec![v; n * c * h * w], n, c, h, w }
    }

    pub fn from_fn(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bn, ch, y, x));
                    }
                }
            }
        }
        Self { data, n, c, h, w }
    }

    /// Internal constructor for op outputs whose finiteness follows from the
    /// inputs; checked in debug builds.
    pub(crate) fn from_raw(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), n * c * h * w);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data, n, c, h, w }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-contiguous `(h*w)` slice of one `(batch, channel)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    /// Picks one batch item as an `1xCxHxW` map.
    pub fn item(&self, n: usize) -> FeatureMap<T> {
        let per = self.c * self.h * self.w;
        FeatureMap::from_raw(1, self.c, self.h, self.w, self.data[n * per..(n + 1) * per].to_vec())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> FeatureMap<T> {
        FeatureMap { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn scale(&self, a: T) -> FeatureMap<T> {
        self.map(|v| v * a)
    }

    pub fn add(&self, other: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(FeatureMap { data, ..*self })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to64().abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &FeatureMap<T>) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to64() - b.to64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Rank-4 convolution filter bank `(out_channels, in_channels, kh, kw)` with
/// stride and zero padding. Kernel extents must be odd.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    weights: Vec<T>,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(out_c: usize, in_c: usize, kh: usize, kw: usize, stride: usize, padding: usize, weights: Vec<T>) -> Result<Self> {
        if out_c == 0 || in_c == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!("kernel dims must be positive, got {out_c}x{in_c}x{kh}x{kw}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be >= 1".into()));
        }
        if weights.len() != out_c * in_c * kh * kw {
            return Err(Error::Shape(format!(
                "weight length {} does not match {out_c}x{in_c}x{kh}x{kw}",
                weights.len()
            )));
        }
        if let Some(bad) = weights.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite kernel weight {bad}")));
        }
        Ok(Self { weights, out_c, in_c, kh, kw, stride, padding })
    }

    /// Delta kernel: center tap 1 on matching in/out channel, "same" geometry.
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        let mut w = vec![T::zero(); channels * channels * k * k];
        for c in 0..channels {
            w[((c * channels + c) * k + k / 2) * k + k / 2] = T::one();
        }
        Self::new(channels, channels, k, k, 1, k / 2, w)
    }

    #[inline]
    pub fn out_c(&self) -> usize {
        self.out_c
    }
    #[inline]
    pub fn in_c(&self) -> usize {
        self.in_c
    }
    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }
    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }
    #[inline]
    pub fn stride(&self) -> usize {
        self.stride
    }
    #[inline]
    pub fn padding(&self) -> usize {
        self.padding
    }

    #[inline]
    pub fn at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> T {
        self.weights[((oc * self.in_c + ic) * self.kh + ky) * self.kw + kx]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }
}

/// Per-channel 2-D spectrum split into modulus and argument grids.
///
/// `amplitude >= 0` everywhere; `phase` lies in `(-pi, pi]`, with the phase of
/// an exactly-zero bin fixed to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T> {
    amplitude: Vec<T>,
    phase: Vec<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl<T: Scalar> ComplexSpectrum<T> {
    pub fn new(n: usize, c: usize, h: usize, w: usize, amplitude: Vec<T>, phase: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("spectrum dims must be positive, got {n}x{c}x{h}x{w}")));
        }
        let len = n * c * h * w;
        if amplitude.len() != len || phase.len() != len {
            return Err(Error::Shape(format!(
                "spectrum grids ({}, {}) do not match shape {n}x{c}x{h}x{w}",
                amplitude.len(),
                phase.len()
            )));
        }
        let pi = T::of(std::f64::consts::PI);
        for (&a, &p) in amplitude.iter().zip(&phase) {
            if !a.is_finite() || a < T::zero() {
                return Err(Error::Shape(format!("amplitude {a} out of range")));
            }
            if !p.is_finite() || p <= -pi || p > pi {
                return Err(Error::Shape(format!("phase {p} outside (-pi, pi]")));
            }
        }
        Ok(Self { amplitude, phase, n, c, h, w })
    }

    pub(crate) fn from_raw(n: usize, c: usize, h: usize, w: usize, amplitude: Vec<T>, phase: Vec<T>) -> Self {
        Self { amplitude, phase, n, c, h, w }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, u: usize, v: usize) -> usize {
        ((n * self.c + c) * self.h + u) * self.w + v
    }

    pub fn amplitude(&self) -> &[T] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[T] {
        &self.phase
    }

    pub fn amp_at(&self, n: usize, c: usize, u: usize, v: usize) -> T {
        self.amplitude[self.idx(n, c, u, v)]
    }

    pub fn phase_at(&self, n: usize, c: usize, u: usize, v: usize) -> T {
        self.phase[self.idx(n, c, u, v)]
    }
}

/// Binary segmentation grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    data: Vec<bool>,
    h: usize,
    w: usize,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("mask dims must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::Shape(format!("mask length {} does not match {h}x{w}", data.len())));
        }
        Ok(Self { data, h, w })
    }

    pub fn filled(h: usize, w: usize, v: bool) -> Self {
        Self { data: vec![v; h * w], h, w }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn fg_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn bg_count(&self) -> usize {
        self.data.len() - self.fg_count()
    }

    /// Nearest-neighbor downsample at pixel centers; preserves binarity.
    pub fn downsample_nearest(&self, h: usize, w: usize) -> Result<Mask> {
        if h == 0 || w == 0 {
            return Err(Error::Shape("downsample target must be positive".into()));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = (((y as f64 + 0.5) * self.h as f64 / h as f64) as usize).min(self.h - 1);
            for x in 0..w {
                let sx = (((x as f64 + 0.5) * self.w as f64 / w as f64) as usize).min(self.w - 1);
                data.push(self.at(sy, sx));
            }
        }
        Mask::new(h, w, data)
    }
}
