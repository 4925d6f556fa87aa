//! Central finite-difference gradient checker.

use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-12)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index of the parameter with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `f` receives the perturbed parameter vector and returns the scalar
/// objective.
pub fn grad_check<F>(params: &[f64], analytic: &[f64], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} params", params.len()),
            format!("{} gradients", analytic.len()),
        ));
    }
    let mut p = params.to_vec();
    let mut eval = |p: &[f64], i: usize| -> Result<f64> {
        let v = f(p)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "objective is {v} with parameter {i} perturbed"
            )));
        }
        Ok(v)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: params.len(),
    };
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = eval(&p, i)?;
        p[i] = orig - h;
        let minus = eval(&p, i)?;
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
