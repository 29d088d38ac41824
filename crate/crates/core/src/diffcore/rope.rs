//! Rotary position embedding on consecutive dimension pairs.

use super::Real;
use crate::error::{Error, Result};

/// Frequency of pair `j` (0-based) for head width `dh`: `10000^{-2j/dh}`.
pub fn rope_frequency(j: usize, dh: usize) -> Real {
    (10000.0 as Real).powf(-2.0 * j as Real / dh as Real)
}

/// Rotates pairs `(u[2j], u[2j+1])` by angle `pos·θ_j`; `inverse` rotates
/// by the negative angle, which is also the transpose used in backward.
pub(crate) fn rope_rotate_in_place(u: &mut [Real], pos: Real, inverse: bool) {
    let dh = u.len();
    let sign = if inverse { -1.0 } else { 1.0 };
    for j in 0..dh / 2 {
        let angle = sign * pos * rope_frequency(j, dh);
        let (s, c) = angle.sin_cos();
        let (a, b) = (u[2 * j], u[2 * j + 1]);
        u[2 * j] = a * c - b * s;
        u[2 * j + 1] = a * s + b * c;
    }
}

/// Rotary embedding of a single head vector at position `m`.
pub fn rope_rotate(u: &[Real], m: usize) -> Result<Vec<Real>> {
    if u.len() % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head width, got {}",
            u.len()
        )));
    }
    let mut out = u.to_vec();
    rope_rotate_in_place(&mut out, m as Real, false);
    Ok(out)
}
