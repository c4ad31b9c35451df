//! Finite-difference utilities shared by gradient tests.

use super::Real;

/// Central differences of a scalar function at `x` with step `h`.
pub fn central_diff(f: &mut impl FnMut(&[Real]) -> Real, x: &[Real], h: Real) -> Vec<Real> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest relative discrepancy: `|a−n| / max(floor, |a|, |n|)`.
pub fn max_rel_err(analytic: &[Real], numeric: &[Real], floor: Real) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / floor.max(a.abs()).max(n.abs()))
        .fold(0.0, Real::max)
}
