//! Scalar element trait: f32 for training speed, f64 for verification paths.

use std::fmt::{Debug, Display};

use super::simd;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element of a [`crate::numerics::Tensor`].
///
/// The default training dtype is `f32`; all oracle and verification paths
/// instantiate `f64` so tolerances in the 1e-9..1e-12 range are meaningful.
pub trait Element:
    Copy
    + Debug
    + Display
    + Default
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const BYTES: usize;
    /// Name stored in checkpoint headers ("f32" / "f64").
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn to_bits_u64(self) -> u64;

    /// Max over a nonempty slice.
    fn max_slice(data: &[Self]) -> Self {
        let mut m = data[0];
        for &v in &data[1..] {
            m = m.max(v);
        }
        m
    }

    /// Dot product of equal-length slices.
    fn dot_slice(a: &[Self], b: &[Self]) -> Self {
        let mut acc = Self::ZERO;
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    /// Whole-slice finiteness probe (used after every op).
    fn finite_slice(data: &[Self]) -> bool {
        data.iter().all(|v| v.is_finite())
    }

    /// `dst[i] = exp(src[i] - shift)` over a slice.
    ///
    /// For f64 (every verification path) this is exactly libm exp; the
    /// f32 override runs an 8-wide SIMD polynomial (about 1 ulp of
    /// relative error), which is what makes softmax-heavy training and
    /// scoring CPU-viable. Deterministic either way.
    fn exp_shifted(dst: &mut [Self], src: &[Self], shift: Self) {
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - shift).exp();
        }
    }

    /// `dst[i] = gelu(src[i])` (tanh approximation).
    fn gelu_slice(dst: &mut [Self], src: &[Self]) {
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = gelu_scalar(v);
        }
    }

    /// `acc[i] += upstream[i] * gelu'(x[i])`.
    fn gelu_grad_slice(acc: &mut [Self], upstream: &[Self], x: &[Self]) {
        for i in 0..acc.len() {
            acc[i] += upstream[i] * gelu_grad_scalar(x[i]);
        }
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Strided GEMM kernel: `c = alpha * a @ b + beta * c`.
    ///
    /// Row/column strides allow free transposes; backed by `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline]
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn max_slice(data: &[Self]) -> Self {
        simd::max_f32(data)
    }

    fn dot_slice(a: &[Self], b: &[Self]) -> Self {
        simd::dot_f32(a, b)
    }

    fn finite_slice(data: &[Self]) -> bool {
        simd::finite_f32(data)
    }

    fn exp_shifted(dst: &mut [Self], src: &[Self], shift: Self) {
        simd::exp_shifted_f32(dst, src, shift);
    }

    fn gelu_slice(dst: &mut [Self], src: &[Self]) {
        simd::gelu_f32(dst, src);
    }

    fn gelu_grad_slice(acc: &mut [Self], upstream: &[Self], x: &[Self]) {
        simd::gelu_grad_f32(acc, upstream, x);
    }

    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// GELU (tanh approximation), shared by the scalar defaults.
#[inline]
pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    half * x * (E::ONE + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * k * x * x)
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline]
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
