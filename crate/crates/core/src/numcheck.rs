//! Numerical verification helpers: central finite differences and
//! gradient comparison, used by the test suites to check every analytic
//! gradient in double precision.

use ndarray::Array2;

/// Central finite-difference gradient of `f` with respect to `inputs[k]`.
///
/// `f` is re-evaluated with each element of `inputs[k]` perturbed by
/// `+/- eps`; all other inputs are left untouched. The probed input is
/// restored before returning.
pub fn finite_diff<F>(
    f: &mut F,
    inputs: &mut [Array2<f64>],
    k: usize,
    eps: f64,
) -> Array2<f64>
where
    F: FnMut(&[Array2<f64>]) -> f64,
{
    let dim = inputs[k].raw_dim();
    let mut grad = Array2::zeros(dim);
    let (rows, cols) = inputs[k].dim();
    for r in 0..rows {
        for c in 0..cols {
            let orig = inputs[k][[r, c]];
            inputs[k][[r, c]] = orig + eps;
            let plus = f(inputs);
            inputs[k][[r, c]] = orig - eps;
            let minus = f(inputs);
            inputs[k][[r, c]] = orig;
            grad[[r, c]] = (plus - minus) / (2.0 * eps);
        }
    }
    grad
}

/// Mismatch between an analytic and a numeric gradient for one element:
/// relative error, except that tiny absolute differences (below the
/// finite-difference noise floor) count as zero.
pub fn grad_mismatch(analytic: f64, numeric: f64) -> f64 {
    let abs = (analytic - numeric).abs();
    if abs < 1e-7 {
        return 0.0;
    }
    abs / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Worst [`grad_mismatch`] over two same-shaped gradient matrices.
pub fn max_grad_mismatch(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| grad_mismatch(a, n))
        .fold(0.0, f64::max)
}
