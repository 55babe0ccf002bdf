//! Central-difference gradient oracle.
//!
//! Deliberately independent of the graph's backward pass: it only re-runs a
//! scalar function under coordinate perturbations, so it can arbitrate when
//! an analytic gradient is wrong.

use super::tensor::Tensor;

/// Numeric gradient of `f` at `at`, one tensor per input, using central
/// differences with step `h`.
pub fn central_diff(f: &dyn Fn(&[Tensor]) -> f64, at: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(at.len());
    for ti in 0..at.len() {
        let mut grad = Tensor::zeros(at[ti].shape());
        for k in 0..at[ti].len() {
            let mut plus = at.to_vec();
            plus[ti].data_mut()[k] += h;
            let mut minus = at.to_vec();
            minus[ti].data_mut()[k] -= h;
            grad.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Relative error with an absolute floor so that near-zero pairs compare
/// sanely: |a−b| / (max(|a|,|b|) + 1e-4).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-4)
}

/// Largest [`rel_error`] over two equally shaped tensors.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}
