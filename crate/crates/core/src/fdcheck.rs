//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates a scalar-valued closure, so it stays
//! independent of the tape implementation it is used to verify.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic gradient and the central
/// difference, with an absolute floor to keep near-zero entries meaningful.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs()).max(1e-4);
            (a - n).abs() / scale
        })
        .fold(0.0, f64::max)
}
