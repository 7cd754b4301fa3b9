//! Central finite-difference gradient oracle.
//!
//! Used by the test suites and the `gradcheck` command to verify every
//! backward rule independently of the tape. All arithmetic here is 64-bit:
//! a 32-bit central difference loses most of its significant digits to
//! cancellation, which would make the 1e-4 relative tolerance meaningless.

/// Central difference (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h for every coordinate.
///
/// `f` must be a pure function of its argument. Requires `h > 0`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite differences need a positive step, got {h}");
    let mut grad = Vec::with_capacity(x.len());
    let mut point = x.to_vec();
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let fp = f(&point);
        point[i] = x[i] - h;
        let fm = f(&point);
        point[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Central difference for a single coordinate `i`.
pub fn finite_difference_at<F>(mut f: F, x: &[f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite differences need a positive step, got {h}");
    let mut point = x.to_vec();
    point[i] = x[i] + h;
    let fp = f(&point);
    point[i] = x[i] - h;
    let fm = f(&point);
    (fp - fm) / (2.0 * h)
}

/// Relative error |a − b| / max(|a|, |b|, 1e-8), the acceptance metric for
/// all gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
