//! Central finite-difference gradient checking.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every scalar parameter.
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// `(tensor index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against `(f(p+h) − f(p−h)) / 2h` for every
/// scalar entry of `params`.
///
/// `f` returns the objective value together with its analytic gradient (one
/// matrix per parameter tensor). The relative error of an entry is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(params: &[Matrix], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Invalid(format!(
            "objective returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (g, p) in analytic.iter().zip(params) {
        if g.shape() != p.shape() {
            return Err(Error::shape("grad_check", p.shape(), g.shape()));
        }
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: vec![0.0; params.len()],
        worst: None,
        checked: 0,
    };
    for t in 0..work.len() {
        for e in 0..work[t].len() {
            let orig = work[t].data()[e];
            work[t].data_mut()[e] = orig + step;
            let plus = f(&work)?.0;
            work[t].data_mut()[e] = orig - step;
            let minus = f(&work)?.0;
            work[t].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective not finite when perturbing tensor {t} entry {e}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.per_param[t] {
                report.per_param[t] = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((t, e));
                }
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
