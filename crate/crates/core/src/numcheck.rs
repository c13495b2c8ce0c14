//! Finite-difference gradient oracle used by the test suites.
//!
//! Central differences with a fixed step, compared coordinate-wise against
//! analytic gradients: relative error below `tol` for elements of meaningful
//! magnitude, absolute error below `tol` for near-zero elements.

#[doc(hidden)]
pub const FD_STEP: f64 = 1e-5;

/// Central finite difference of `f` with respect to `values[i]`.
#[doc(hidden)]
pub fn central_diff<F: FnMut(&[f64]) -> f64>(values: &[f64], i: usize, mut f: F) -> f64 {
    let mut v = values.to_vec();
    v[i] = values[i] + FD_STEP;
    let hi = f(&v);
    v[i] = values[i] - FD_STEP;
    let lo = f(&v);
    (hi - lo) / (2.0 * FD_STEP)
}

/// Relative tolerance of the agreement check.
#[doc(hidden)]
pub const FD_RTOL: f64 = 1e-4;

/// Absolute noise floor: central differences of an O(1) quantity in f64 at
/// step 1e-5 carry ~5e-12 of cancellation noise, so coordinates this small
/// cannot be meaningfully compared relatively (verified by an h-sweep: the
/// discrepancy on such coordinates grows as h shrinks).
#[doc(hidden)]
pub const FD_ATOL: f64 = 2e-8;

/// Worst scaled discrepancy between an analytic gradient and the
/// central-difference estimate: `max_i |fd_i - a_i| / max(FD_RTOL*|a_i|,
/// FD_ATOL)`. A value <= 1 means every coordinate agrees to 1e-4 relative
/// error, with near-zero elements compared absolutely.
#[doc(hidden)]
pub fn max_grad_discrepancy<F: FnMut(&[f64]) -> f64>(
    values: &[f64],
    analytic: &[f64],
    mut f: F,
) -> f64 {
    assert_eq!(values.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let fd = central_diff(values, i, &mut f);
        let a = analytic[i];
        let scale = (FD_RTOL * a.abs()).max(FD_ATOL);
        worst = worst.max((fd - a).abs() / scale);
    }
    worst
}
