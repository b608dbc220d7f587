//! Central finite-difference gradient checking.
//!
//! The numeric side only re-evaluates the forward pass, so it is independent
//! of every backward rule it is used to verify.

use crate::tensor::dense::DenseMatrix;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that matching near-zero
/// gradients compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of `f` with respect to every entry of every
/// leaf tensor. `f` must be deterministic in the leaf values.
pub fn central_differences(
    mut f: impl FnMut(&[DenseMatrix]) -> f64,
    leaves: &[DenseMatrix],
) -> Vec<DenseMatrix> {
    let mut work: Vec<DenseMatrix> = leaves.to_vec();
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut grad = DenseMatrix::zeros(leaves[li].rows(), leaves[li].cols());
        for i in 0..leaves[li].len() {
            let orig = work[li].values()[i];
            work[li].values_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work[li].values_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work[li].values_mut()[i] = orig;
            grad.values_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        grads.push(grad);
    }
    grads
}

/// Worst relative error between analytic and numeric gradients.
pub fn max_relative_error(analytic: &[DenseMatrix], numeric: &[DenseMatrix]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&av, &nv) in a.values().iter().zip(n.values()) {
            worst = worst.max(relative_error(av, nv));
        }
    }
    worst
}
