//! 8-wide f32 bulk math.
//!
//! `exp` uses Cephes-style range reduction plus a degree-5 polynomial
//! (about 1 ulp relative error, saturating at the ends, NaN in NaN out);
//! tanh derives from it. Only the f32 training path comes through here;
//! f64 verification paths use libm directly.

use wide::{f32x8, i32x8, CmpLt};

#[inline]
fn exp8(x: f32x8) -> f32x8 {
    let x = x.fast_max(f32x8::splat(-87.0)).fast_min(f32x8::splat(88.0));
    let n = (x * f32x8::splat(std::f32::consts::LOG2_E)).round();
    let r = x - n * f32x8::splat(0.693_359_4) - n * f32x8::splat(-2.121_944_4e-4);
    let mut p = f32x8::splat(1.987_569_1e-4);
    p = p.mul_add(r, f32x8::splat(1.398_199_9e-3));
    p = p.mul_add(r, f32x8::splat(8.333_452e-3));
    p = p.mul_add(r, f32x8::splat(4.166_579_6e-2));
    p = p.mul_add(r, f32x8::splat(1.666_666_5e-1));
    p = p.mul_add(r, f32x8::splat(5.000_000_3e-1));
    let p = (p * r).mul_add(r, r + f32x8::splat(1.0));
    // 2^n via exponent bits.
    let bits = (n.fast_round_int() + i32x8::splat(127)) << 23;
    p * f32x8::from(bytemuck::cast::<i32x8, [f32; 8]>(bits))
}

#[inline]
fn tanh8(x: f32x8) -> f32x8 {
    let a = x.abs();
    let e = exp8(a + a);
    let t = f32x8::splat(1.0) - f32x8::splat(2.0) / (e + f32x8::splat(1.0));
    x.cmp_lt(f32x8::splat(0.0)).blend(-t, t)
}

#[inline]
fn load(src: &[f32]) -> f32x8 {
    f32x8::from([src[0], src[1], src[2], src[3], src[4], src[5], src[6], src[7]])
}

pub fn exp_shifted_f32(dst: &mut [f32], src: &[f32], shift: f32) {
    debug_assert_eq!(dst.len(), src.len());
    let sh = f32x8::splat(shift);
    let mut chunks = dst.chunks_exact_mut(8);
    let mut schunks = src.chunks_exact(8);
    for (d, s) in (&mut chunks).zip(&mut schunks) {
        d.copy_from_slice(&(exp8(load(s) - sh)).to_array());
    }
    for (d, &s) in chunks.into_remainder().iter_mut().zip(schunks.remainder()) {
        *d = (s - shift).exp();
    }
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

pub fn gelu_f32(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    let c = f32x8::splat(GELU_C);
    let k = f32x8::splat(GELU_K);
    let half = f32x8::splat(0.5);
    let one = f32x8::splat(1.0);
    let mut chunks = dst.chunks_exact_mut(8);
    let mut schunks = src.chunks_exact(8);
    for (d, s) in (&mut chunks).zip(&mut schunks) {
        let x = load(s);
        let u = c * (x + k * x * x * x);
        let y = half * x * (one + tanh8(u));
        d.copy_from_slice(&y.to_array());
    }
    for (d, &x) in chunks.into_remainder().iter_mut().zip(schunks.remainder()) {
        *d = super::element::gelu_scalar(x);
    }
}

pub fn gelu_grad_f32(acc: &mut [f32], upstream: &[f32], x: &[f32]) {
    debug_assert_eq!(acc.len(), upstream.len());
    debug_assert_eq!(acc.len(), x.len());
    let c = f32x8::splat(GELU_C);
    let k = f32x8::splat(GELU_K);
    let half = f32x8::splat(0.5);
    let one = f32x8::splat(1.0);
    let three = f32x8::splat(3.0);
    let n = acc.len() / 8 * 8;
    for i in (0..n).step_by(8) {
        let xv = load(&x[i..i + 8]);
        let g = load(&upstream[i..i + 8]);
        let u = c * (xv + k * xv * xv * xv);
        let t = tanh8(u);
        let sech2 = one - t * t;
        let grad = half * (one + t) + half * xv * sech2 * c * (one + three * k * xv * xv);
        let out = load(&acc[i..i + 8]) + g * grad;
        acc[i..i + 8].copy_from_slice(&out.to_array());
    }
    for i in n..acc.len() {
        acc[i] += upstream[i] * super::element::gelu_grad_scalar(x[i]);
    }
}

/// True iff every value is finite: multiplying by zero maps finite
/// values to ±0 and Inf/NaN to NaN, so a lane-wise accumulator stays
/// zero exactly when the slice is clean.
pub fn finite_f32(data: &[f32]) -> bool {
    let mut acc = f32x8::splat(0.0);
    let zero = f32x8::splat(0.0);
    let mut chunks = data.chunks_exact(8);
    for c in &mut chunks {
        acc += load(c) * zero;
    }
    let lanes = acc.to_array();
    let mut ok = lanes.iter().all(|v| *v == 0.0);
    for &v in chunks.remainder() {
        ok &= v.is_finite();
    }
    ok
}

pub fn max_f32(data: &[f32]) -> f32 {
    let mut chunks = data.chunks_exact(8);
    let mut m = f32::NEG_INFINITY;
    let mut lanes = f32x8::splat(f32::NEG_INFINITY);
    for c in &mut chunks {
        lanes = lanes.fast_max(load(c));
    }
    for v in lanes.to_array() {
        m = m.max(v);
    }
    for &v in chunks.remainder() {
        m = m.max(v);
    }
    m
}

pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = f32x8::splat(0.0);
    let n = a.len() / 8 * 8;
    for i in (0..n).step_by(8) {
        acc = load(&a[i..i + 8]).mul_add(load(&b[i..i + 8]), acc);
    }
    let mut total: f32 = acc.to_array().iter().sum();
    for i in n..a.len() {
        total += a[i] * b[i];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_libm_to_f32_precision() {
        let xs: Vec<f32> = (-2000..2000).map(|i| i as f32 * 0.01).collect();
        let mut out = vec![0.0f32; xs.len()];
        exp_shifted_f32(&mut out, &xs, 0.0);
        for (&x, &got) in xs.iter().zip(&out) {
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            assert!(rel <= 3e-7, "exp({}) = {} vs {}", x, got, want);
        }
    }

    #[test]
    fn exp_saturates_and_propagates_nan() {
        let xs = [-1000.0f32, 1000.0, f32::NAN, 0.0, -87.5, 88.5];
        let mut out = [0.0f32; 6];
        exp_shifted_f32(&mut out, &xs, 0.0);
        assert!(out[0] > 0.0 && out[0] < 1e-35);
        assert!(out[1] > 1e38 && out[1].is_finite());
        assert!(out[2].is_nan());
        assert_eq!(out[3], 1.0);
    }

    #[test]
    fn max_and_dot_match_scalar() {
        let a: Vec<f32> = (0..37).map(|i| ((i * 37) % 19) as f32 - 9.0).collect();
        let b: Vec<f32> = (0..37).map(|i| ((i * 11) % 23) as f32 * 0.5).collect();
        assert_eq!(max_f32(&a), a.iter().cloned().fold(f32::NEG_INFINITY, f32::max));
        let want: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot_f32(&a, &b) - want).abs() < 1e-3);
    }

    #[test]
    fn finite_probe_catches_bad_values() {
        let mut v = vec![1.0f32; 37];
        assert!(finite_f32(&v));
        v[20] = f32::NAN;
        assert!(!finite_f32(&v));
        v[20] = f32::INFINITY;
        assert!(!finite_f32(&v));
        v[20] = -0.0;
        assert!(finite_f32(&v));
        v[36] = f32::NEG_INFINITY; // remainder lane
        assert!(!finite_f32(&v));
    }

    #[test]
    fn gelu_matches_scalar_reference() {
        let xs: Vec<f32> = (-100..100).map(|i| i as f32 * 0.05).collect();
        let mut out = vec![0.0f32; xs.len()];
        gelu_f32(&mut out, &xs);
        for (&x, &got) in xs.iter().zip(&out) {
            let want = super::super::element::gelu_scalar(x);
            assert!((got - want).abs() <= 1e-5, "gelu({}) = {} vs {}", x, got, want);
        }
    }
}
