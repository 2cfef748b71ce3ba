//! Central finite differences, the reference every hand-derived gradient in
//! the crate is checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively; otherwise rounding noise on near-zero entries dominates.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at element {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Central difference of `f` at a single element of `x`.
pub fn finite_diff_at<F>(f: F, x: &Tensor, index: usize, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + eps;
    let plus = f(&probe)?;
    probe.data_mut()[index] = orig - eps;
    let minus = f(&probe)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!("objective at element {index}")));
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`rel_error`] over matching elements.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
