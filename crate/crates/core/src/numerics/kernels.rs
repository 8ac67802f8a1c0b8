//! Pure numerical kernels.
//!
//! Both the autodiff tape and the tape-free inference path call these, so
//! the two execution modes are bitwise identical by construction. GEMMs go
//! through `matrixmultiply`; everything else is straightforward loops over
//! contiguous rows.

use super::element::Element;

/// `C[m,n] (+)= alpha * A @ B` with optional logical transposes.
///
/// `a` stores the logical `[m,k]` operand as `[m,k]` row-major, or `[k,m]`
/// when `ta`. Likewise `b` for `[k,n]` / `[n,k]` with `tb`. `beta` scales
/// the existing contents of `c` (0 = overwrite, 1 = accumulate).
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<E: Element>(
    c: &mut [E],
    beta: E,
    alpha: E,
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm out size");
    // Narrow outputs are a bad shape for the GEMM kernel; computing the
    // transpose (wide output) and copying back is several times faster.
    if n <= 16 && m >= 64 && k >= 64 {
        let mut tmp = vec![E::ZERO; n * m];
        gemm_into(&mut tmp, E::ZERO, alpha, b, a, n, k, m, !tb, !ta);
        if beta == E::ZERO {
            for i in 0..m {
                for j in 0..n {
                    c[i * n + j] = tmp[j * m + i];
                }
            }
        } else {
            for i in 0..m {
                for j in 0..n {
                    c[i * n + j] = beta * c[i * n + j] + tmp[j * m + i];
                }
            }
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<E: Element>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    gemm_into(&mut c, E::ZERO, E::ONE, a, b, m, k, n, ta, tb);
    c
}

/// Batched `alpha * [h,s,d] @ [h,s,d]^T -> [h,s,s]` (scores) when `tb`,
/// or `alpha * [h,s,s] @ [h,s,d] -> [h,s,d]` (apply) when not.
#[allow(clippy::too_many_arguments)]
pub fn bmm<E: Element>(
    a: &[E],
    b: &[E],
    h: usize,
    m: usize,
    k: usize,
    n: usize,
    tb: bool,
    alpha: E,
) -> Vec<E> {
    let mut out = vec![E::ZERO; h * m * n];
    let bk = if tb { n * k } else { k * n };
    for head in 0..h {
        gemm_into(
            &mut out[head * m * n..(head + 1) * m * n],
            E::ZERO,
            alpha,
            &a[head * m * k..(head + 1) * m * k],
            &b[head * bk..(head + 1) * bk],
            m,
            k,
            n,
            false,
            tb,
        );
    }
    out
}

/// Softmax along `axis` of `shape`; numerically stabilized by max
/// subtraction, which also makes it bitwise shift-invariant.
pub fn softmax_axis<E: Element>(x: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![E::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut m = x[base];
            for j in 1..extent {
                m = m.max(x[base + j * inner]);
            }
            if inner == 1 {
                let lane = &mut out[base..base + extent];
                E::exp_shifted(lane, &x[base..base + extent], m);
                let mut sum = E::ZERO;
                for &v in lane.iter() {
                    sum += v;
                }
                let inv = E::ONE / sum;
                for v in lane.iter_mut() {
                    *v *= inv;
                }
            } else {
                let mut sum = E::ZERO;
                for j in 0..extent {
                    let e = (x[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..extent {
                    out[base + j * inner] /= sum;
                }
            }
        }
    }
    out
}

/// Softmax over the masked rows of `[h, s, s]` attention scores: row `i`
/// normalizes over `j <= i` only; entries above the diagonal are exactly
/// +0.0. The exact zeros are what let the attention apply run as a plain
/// batched matmul without breaking causality.
pub fn causal_softmax<E: Element>(scores: &[E], h: usize, s: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; scores.len()];
    for head in 0..h {
        for i in 0..s {
            let row = &scores[(head * s + i) * s..(head * s + i) * s + s];
            let orow = &mut out[(head * s + i) * s..(head * s + i) * s + s];
            let mut m = row[0];
            for &v in &row[1..=i] {
                m = m.max(v);
            }
            E::exp_shifted(&mut orow[..=i], &row[..=i], m);
            let mut sum = E::ZERO;
            for &v in &orow[..=i] {
                sum += v;
            }
            let inv = E::ONE / sum;
            for v in &mut orow[..=i] {
                *v *= inv;
            }
        }
    }
    out
}

/// Per-row layer norm over the last dim: `y = gamma * (x - mu) / sqrt(var + eps) + beta`.
/// Returns `(y, cache)` where cache holds per-row `(mu, rstd)` for backward.
pub fn layer_norm<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    eps: E,
    rows: usize,
    d: usize,
) -> (Vec<E>, Vec<(E, E)>) {
    let mut out = vec![E::ZERO; x.len()];
    let mut cache = Vec::with_capacity(rows);
    let inv_d = E::ONE / E::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut mu = E::ZERO;
        for &v in xr {
            mu += v;
        }
        mu *= inv_d;
        let mut var = E::ZERO;
        for &v in xr {
            let c = v - mu;
            var += c * c;
        }
        var *= inv_d;
        let rstd = E::ONE / (var + eps).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = gamma[j] * ((xr[j] - mu) * rstd) + beta[j];
        }
        cache.push((mu, rstd));
    }
    (out, cache)
}

/// GELU (tanh approximation).
pub fn gelu<E: Element>(x: &[E]) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    E::gelu_slice(&mut out, x);
    out
}

/// Rotary tables for positions `0..max_pos` at head dim `d` (even).
pub fn rope_tables<E: Element>(max_pos: usize, d: usize, base: f64) -> (Vec<E>, Vec<E>) {
    let pairs = d / 2;
    let mut cos = Vec::with_capacity(max_pos * pairs);
    let mut sin = Vec::with_capacity(max_pos * pairs);
    for pos in 0..max_pos {
        for i in 0..pairs {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
            cos.push(E::from_f64(theta.cos()));
            sin.push(E::from_f64(theta.sin()));
        }
    }
    (cos, sin)
}

/// Apply rotary embedding to `[h, s, d]`, rotating dim pairs `(2i, 2i+1)`
/// by the position-dependent angle. `invert` applies the transpose
/// rotation (used by backward).
pub fn rope_apply<E: Element>(
    x: &[E],
    h: usize,
    s: usize,
    d: usize,
    cos: &[E],
    sin: &[E],
    invert: bool,
) -> Vec<E> {
    let pairs = d / 2;
    let mut out = vec![E::ZERO; x.len()];
    for head in 0..h {
        for pos in 0..s {
            let xr = &x[(head * s + pos) * d..(head * s + pos) * d + d];
            let orow = &mut out[(head * s + pos) * d..(head * s + pos) * d + d];
            let tc = &cos[pos * pairs..(pos + 1) * pairs];
            let ts = &sin[pos * pairs..(pos + 1) * pairs];
            for i in 0..pairs {
                let (a, b) = (xr[2 * i], xr[2 * i + 1]);
                let (c, sn) = if invert { (tc[i], -ts[i]) } else { (tc[i], ts[i]) };
                orow[2 * i] = a * c - b * sn;
                orow[2 * i + 1] = a * sn + b * c;
            }
        }
    }
    out
}

/// Log-softmax of one row (stabilized); used by likelihood scoring.
pub fn log_softmax_row<E: Element>(row: &[E]) -> Vec<E> {
    let mut m = row[0];
    for &v in &row[1..] {
        m = m.max(v);
    }
    let mut exps = vec![E::ZERO; row.len()];
    E::exp_shifted(&mut exps, row, m);
    let mut sum = E::ZERO;
    for &v in &exps {
        sum += v;
    }
    let lse = m + sum.ln();
    row.iter().map(|&v| v - lse).collect()
}

/// L2 norm of a slice, in f64 for stable reporting.
pub fn l2_norm<E: Element>(v: &[E]) -> f64 {
    v.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // I2 x A = A for any 2x2 A.
        let a = vec![3.0f64, -1.0, 2.5, 7.0];
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&i2, &a, 2, 2, 2, false, false), a);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[0],[1]] = [[2],[4]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![0.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 2, 1, false, false), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_transpose_flags() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = vec![1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // [3,2]
        let c = matmul(&a, &b, 2, 3, 2, false, false);
        // a^T stored as-is, logical transpose: [3,2]^T @ ...
        let at = vec![1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // [3,2] = a^T
        let c2 = matmul(&at, &b, 2, 3, 2, true, false);
        assert_eq!(c, c2);
        let bt = vec![1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0]; // [2,3] = b^T
        let c3 = matmul(&a, &bt, 2, 3, 2, false, true);
        assert_eq!(c, c3);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let out = softmax_axis(&[0.0f64, 0.0], &[2], 0);
        assert_eq!(out, vec![0.5, 0.5]);
        // [0, ln 3] -> [1/4, 3/4]
        let out = softmax_axis(&[0.0f64, 3.0f64.ln()], &[2], 0);
        assert!((out[0] - 0.25).abs() < 1e-15);
        assert!((out[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_bitwise() {
        // Dyadic values + power-of-two shift keep the additions exact, so
        // the max-subtracted exponents must match bit for bit.
        let x = [0.25f64, -1.5, 2.75, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 128.0).collect();
        let a = softmax_axis(&x, &[4], 0);
        let b = softmax_axis(&shifted, &[4], 0);
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_inner_axis() {
        // shape [2,2], axis 0: columns sum to one.
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let out = softmax_axis(&x, &[2, 2], 0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
        assert!((out[1] + out[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn causal_softmax_rows() {
        let s = 3;
        let scores = vec![0.0f64; s * s];
        let p = causal_softmax(&scores, 1, s);
        assert_eq!(p[0], 1.0); // row 0: only j=0
        assert_eq!(&p[1..3], &[0.0, 0.0]);
        assert!((p[3] - 0.5).abs() < 1e-15 && (p[4] - 0.5).abs() < 1e-15);
        assert_eq!(p[5], 0.0);
        for j in 6..9 {
            assert!((p[j] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_yields_beta() {
        let x = vec![5.0f64; 4];
        let gamma = vec![2.0; 4];
        let beta = vec![0.7; 4];
        let (y, _) = layer_norm(&x, &gamma, &beta, 1e-5, 1, 4);
        for v in y {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        // [-1, 1] has mean 0 and variance 1; with eps -> 0 output is itself.
        let (y, _) = layer_norm(&[-1.0f64, 1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12, 1, 2);
        assert!((y[0] + 1.0).abs() < 1e-6);
        assert!((y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let (cos, sin) = rope_tables::<f64>(2, 4, 10_000.0);
        let y = rope_apply(&x, 1, 1, 4, &cos, &sin, false);
        assert_eq!(x, y);
    }

    #[test]
    fn rope_invert_round_trips() {
        let x = vec![0.5f64, -1.0, 2.0, 0.25, 1.0, 1.0, -0.5, 0.1];
        let (cos, sin) = rope_tables::<f64>(2, 4, 10_000.0);
        let y = rope_apply(&x, 1, 2, 4, &cos, &sin, false);
        let back = rope_apply(&y, 1, 2, 4, &cos, &sin, true);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
