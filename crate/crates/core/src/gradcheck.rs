//! Central finite-difference verification of analytic gradients.
//!
//! Everything here only evaluates forward maps; it never calls a backward
//! kernel, so it can serve as an independent check on one.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            tolerance: 1e-4,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn assert_ok(&self, what: &str) {
        assert!(
            self.passed(),
            "{what}: relative error {:.3e} > {:.1e} at index {} (analytic {:.9e}, numeric {:.9e})",
            self.max_rel_error,
            self.tolerance,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric
        );
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at `point` along coordinate `index`.
pub fn central_difference(
    point: &Tensor<f64>,
    index: usize,
    epsilon: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    let mut probe = point.clone();
    let x0 = probe.data()[index];
    probe.data_mut()[index] = x0 + epsilon;
    let plus = f(&probe);
    probe.data_mut()[index] = x0 - epsilon;
    let minus = f(&probe);
    (plus - minus) / (2.0 * epsilon)
}

/// Compares every coordinate of `analytic` with a central difference of `f`.
pub fn check_gradient(
    point: &Tensor<f64>,
    analytic: &[f64],
    f: impl FnMut(&Tensor<f64>) -> f64,
    cfg: &GradCheck,
) -> GradReport {
    let all: Vec<usize> = (0..point.len()).collect();
    check_gradient_at(point, analytic, &all, f, cfg)
}

/// Like [`check_gradient`] but only at the listed coordinates.
pub fn check_gradient_at(
    point: &Tensor<f64>,
    analytic: &[f64],
    indices: &[usize],
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    cfg: &GradCheck,
) -> GradReport {
    assert_eq!(
        point.len(),
        analytic.len(),
        "gradient length must match point"
    );
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance: cfg.tolerance,
    };
    for &i in indices {
        let numeric = central_difference(point, i, cfg.epsilon, &mut f);
        let err = relative_error(analytic[i], numeric, cfg.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}
