//! Central-difference gradient oracle.
//!
//! Re-evaluates a scalar objective with each parameter component nudged by
//! plus/minus h and compares the secant slope against the gradient the tape
//! produced. The oracle only needs forward evaluations, so it is independent
//! of every backward rule it certifies.

use super::params::{ParamId, ParamStore};

/// Outcome of a [`finite_diff_check`] sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked components, using
    /// |analytic - numeric| / max(1, |numeric|).
    pub max_rel_err: f64,
    /// Parameter name and flat component index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Number of scalar components checked.
    pub components: usize,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks `grads` (one entry per parameter to verify) against central
/// differences of `f` with step `h`. The store is restored to its original
/// values before returning.
///
/// `f` must be a pure function of the store contents: any randomness in the
/// objective has to be frozen by the caller before checking.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    grads: &[(ParamId, Vec<f64>)],
    h: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(h > 0.0, "finite_diff_check: h must be positive");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        components: 0,
    };
    for (pid, analytic) in grads {
        debug_assert_eq!(analytic.len(), store.numel(*pid));
        for i in 0..analytic.len() {
            let original = store.values(*pid)[i];
            store.values_mut(*pid)[i] = original + h;
            let up = f(store);
            store.values_mut(*pid)[i] = original - h;
            let down = f(store);
            store.values_mut(*pid)[i] = original;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            report.components += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(*pid).to_string(), i));
            }
        }
    }
    report
}
