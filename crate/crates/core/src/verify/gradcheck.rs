//! Central finite differences.

use crate::tensor::Float;

/// Step used by every gradient check.
pub const STEP: Float = 1e-4;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const REL_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely. Central differences
/// at step 1e-4 carry ~1e-8 truncation error, so gradients near zero cannot
/// be compared relatively.
pub const ABS_FLOOR: f64 = 1e-3;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[Float], step: Float) -> Vec<Float>
where
    F: FnMut(&[Float]) -> Float,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, ABS_FLOOR)` over paired entries.
pub fn max_relative_error(analytic: &[Float], numeric: &[Float]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a as f64, n as f64);
            (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_derivative() {
        let g = central_difference(|x| x[0] * x[0] * x[0] + 2.0 * x[1], &[1.5, -3.0], STEP);
        assert!(max_relative_error(&g, &[6.75, 2.0]) < 1e-7);
    }
}
