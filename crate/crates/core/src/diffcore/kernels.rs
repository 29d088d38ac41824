//! Dense loops behind the tape primitives. All matrices are row-major.

use super::Real;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_bt_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_at_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(not(feature = "f32"))]
fn erf(x: Real) -> Real {
    libm::erf(x)
}

#[cfg(feature = "f32")]
fn erf(x: Real) -> Real {
    libm::erff(x)
}

const FRAC_1_SQRT_2: Real = 0.707_106_781_186_547_6;
const FRAC_1_SQRT_2PI: Real = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn std_normal_cdf(x: Real) -> Real {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: Real) -> Real {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: Real) -> Real {
    std_normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` computed around the row maximum.
pub fn logsumexp(row: &[Real]) -> Real {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let s: Real = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a: Vec<Real> = (0..6).map(|x| x as Real * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<Real> = (0..12).map(|x| (x as Real).sin()).collect(); // 3x4
        let mut out = vec![0.0; 8];
        matmul_acc(&a, &b, &mut out, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: Real = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // bᵀ stored as 4x3
        let bt: Vec<Real> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut out2 = vec![0.0; 8];
        matmul_bt_acc(&a, &bt, &mut out2, 2, 3, 4);
        assert_eq!(out, out2);
        // aᵀ stored as 3x2, then aᵀᵀ·b
        let at: Vec<Real> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let mut out3 = vec![0.0; 8];
        matmul_at_acc(&at, &b, &mut out3, 3, 2, 4);
        for (x, y) in out.iter().zip(&out3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((softplus(0.0) - 2.0_f64.ln() as Real).abs() < 1e-12);
        let mut r = [0.0, 0.0];
        softmax_row(&mut r);
        assert_eq!(r, [0.5, 0.5]);
        assert!((sigmoid(-800.0)).abs() < 1e-300 || sigmoid(-800.0) == 0.0);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }
}
