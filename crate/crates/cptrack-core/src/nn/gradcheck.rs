//! Finite-difference utilities for validating analytic gradients in tests.

/// Central difference `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Relative error with an absolute floor so near-zero gradients do not blow
/// the ratio up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}
