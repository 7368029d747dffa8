//! Central finite-difference gradient checking.
//!
//! Independent of the tape: the objective is evaluated as a black box on
//! perturbed copies of the inputs.

use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every entry of `inputs[which]`.
pub fn numerical_gradient(
    inputs: &[Tensor],
    which: usize,
    step: f64,
    f: &dyn Fn(&[Tensor]) -> f64,
) -> Tensor {
    let mut work = inputs.to_vec();
    let (rows, cols) = inputs[which].shape();
    let mut grad = Tensor::zeros(rows, cols);
    for i in 0..rows * cols {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = f(&work);
        work[which].data_mut()[i] = orig - step;
        let minus = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error between two gradient tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Summary of one check over all inputs.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares `analytic[i]` against finite differences of `f` for each input.
pub fn check(
    inputs: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    floor: f64,
    f: &dyn Fn(&[Tensor]) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
    };
    for (which, a) in analytic.iter().enumerate() {
        let numeric = numerical_gradient(inputs, which, step, f);
        for (idx, (&x, &n)) in a.data().iter().zip(numeric.data()).enumerate() {
            let err = relative_error(x, n, floor);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((which, idx, x, n));
            }
        }
    }
    report
}
