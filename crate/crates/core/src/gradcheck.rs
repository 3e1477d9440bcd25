//! Central finite-difference verification utilities.
//!
//! Used by unit tests and the acceptance suite to check analytic gradients.
//! Deliberately independent of the tape's backward pass: it only re-runs
//! forward evaluations at perturbed inputs.

use ndarray::ArrayD;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_grad(
    mut f: impl FnMut(&[ArrayD<f64>]) -> f64,
    inputs: &[ArrayD<f64>],
    which: usize,
    h: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(inputs[which].raw_dim());
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for i in 0..inputs[which].len() {
        let orig = work[which].as_slice().unwrap()[i];
        work[which].as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central-difference gradients with respect to every array in `params`.
pub fn numeric_grad_params(
    mut f: impl FnMut(&[ArrayD<f64>]) -> f64,
    params: &[ArrayD<f64>],
    h: f64,
) -> Vec<ArrayD<f64>> {
    (0..params.len())
        .map(|slot| numeric_grad(&mut f, params, slot, h))
        .collect()
}

/// Largest elementwise relative error between two gradients, with a small
/// absolute floor so near-zero entries do not dominate.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Panic when any element differs by more than `tol` relative error.
pub fn assert_close_rel(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, tol: f64) {
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        let rel = (a - n).abs() / denom;
        assert!(
            rel < tol,
            "gradient mismatch: analytic {a} vs numeric {n} (rel {rel:.3e})"
        );
    }
}
