//! Central finite differences, the independent oracle for every backward rule.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + δe_i) - f(x - δe_i)) / 2δ` for every coordinate `i`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, delta: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if delta <= 0.0 || !delta.is_finite() {
        return Err(Error::Contract(format!("finite difference step must be positive, got {delta}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + delta);
        let up = f(&probe)?.f64();
        probe.data_mut()[i] = T::of(orig.f64() - delta);
        let down = f(&probe)?.f64();
        probe.data_mut()[i] = orig;
        grad.push(T::of((up - down) / (2.0 * delta)));
    }
    Tensor::new(x.shape(), grad)
}

/// Relative error floor: below this magnitude both gradients are treated as
/// zero and the difference is measured absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest elementwise [`relative_error`] between two gradients.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(a.f64(), n.f64()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_f64([3], &[0.3, -2.0, 7.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().copied().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_diff_grad(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
