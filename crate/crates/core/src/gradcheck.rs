//! Central-difference gradients, the reference for checking [`Graph::backward`].
//!
//! [`Graph::backward`]: crate::Graph::backward

use crate::math;
use crate::matrix::Matrix;

/// Denominator floor in [`max_relative_error`], so entries whose true gradient
/// is numerically zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Per-entry `(f(x + h e) - f(x - h e)) / 2h`.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe);
        probe.data_mut()[k] = orig - h;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    out
}

/// `max |a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)` over all entries.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let denom = math::abs(*a).max(math::abs(*n)).max(RELATIVE_ERROR_FLOOR);
            math::abs(a - n) / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        let g = finite_diff_grad(|m| m.frobenius_sq(), &x, 1e-5);
        let expected = Matrix::from_rows(&[[2.0, 4.0]]);
        assert!(max_relative_error(&g, &expected) <= 1e-6);
    }

    #[test]
    fn constant_function() {
        let x = Matrix::from_rows(&[[1.0, -3.0], [0.5, 2.0]]);
        assert_eq!(finite_diff_grad(|_| 7.0, &x, 1e-5), Matrix::zeros(2, 2));
    }
}
