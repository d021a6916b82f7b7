//! Central finite differences, the oracle for every reverse-mode gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-6;
pub const DEFAULT_ATOL: f64 = 1e-8;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_gradient" });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Componentwise agreement: `|a - b| <= max(atol, rtol * max(|a|, |b|))`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol.max(rtol * a.abs().max(b.abs()))
}

/// Largest ratio of the componentwise error to its allowance; `<= 1` passes.
pub fn worst_violation(a: &Tensor, b: &Tensor, rtol: f64, atol: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / atol.max(rtol * x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

#[track_caller]
pub fn assert_close(a: &Tensor, b: &Tensor, rtol: f64, atol: f64) {
    let worst = worst_violation(a, b, rtol, atol);
    assert!(
        worst <= 1.0,
        "tensors differ beyond tolerance (worst ratio {worst:.3}):\n  left  {:?}\n  right {:?}",
        a.data(),
        b.data()
    );
}
