//! Central finite differences, used as the oracle for every backward pass.

use crate::tensor::Tensor;

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every element `i` of `theta`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    theta: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(theta.shape().to_vec(), out).expect("same shape as theta")
}

/// Smallest denominator used by [`relative_error`]; below it the error is
/// measured against this absolute scale. Central differences at `h = 1e-5`
/// carry roundoff near `ε·|f|/h ≈ 3e-11` for unit-scale losses, so with a
/// tolerance of 1e-5 the floor must sit well above 3e-6.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}
