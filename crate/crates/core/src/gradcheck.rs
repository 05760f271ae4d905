//! Central-difference gradient checking.

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `grad` against `(f(x+h·e_k) − f(x−h·e_k)) / 2h` for every coordinate `k`.
///
/// Relative error is `|a − n| / (|a| + |n| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, grad: &Tensor, x: &Tensor, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Tensor) -> f64,
{
    assert_eq!(grad.shape(), x.shape(), "gradient shape must match input");
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad.data()[k];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        if k == 0 || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = k;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tol;
    report
}
