//! Central finite differences for checking analytic gradients.

/// Default step and tolerances used by the gradient suites.
pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            probe[i] = point[i] + step;
            let plus = f(&probe);
            probe[i] = point[i] - step;
            let minus = f(&probe);
            probe[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Elementwise comparison: relative error below `rel_tol`, except where the
/// analytic value is below `abs_floor`, where the absolute error must be.
pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: analytic.len(),
        failures: 0,
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        report.max_abs_err = report.max_abs_err.max(abs);
        let ok = if a.abs() < abs_floor {
            abs < abs_floor
        } else {
            let rel = abs / a.abs().max(n.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            rel < rel_tol
        };
        if !ok || !a.is_finite() || !n.is_finite() {
            report.failures += 1;
        }
    }
    report
}
