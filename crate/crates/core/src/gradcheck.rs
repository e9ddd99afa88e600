//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it is independent
//! of the reverse-mode path it is used to validate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Largest absolute error over all checked coordinates.
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Denominator floor for [`rel_err`].
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Relative error with a small absolute floor, so coordinates whose true
/// gradient is ~0 are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic[i]` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for
/// every coordinate of every input.
///
/// `f` maps the full list of inputs to a scalar loss.
pub fn check<F>(inputs: &[Tensor], analytic: &[Vec<f64>], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (t, grads) in analytic.iter().enumerate() {
        if grads.len() != work[t].numel() {
            return Err(Error::Shape(format!(
                "input {t} has {} entries but {} analytic gradients",
                work[t].numel(),
                grads.len()
            )));
        }
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
