//! Central finite-difference verification of tape gradients.

use super::params::Params;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|g_ad - g_fd| / max(1, |g_fd|)`
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(p+eps) - f(p-eps)) / (2 eps)` on every coordinate of `params`.
pub fn finite_diff_check<F>(f: F, params: &Params, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Params) -> Result<Var>,
{
    finite_diff_report(f, params, eps).map(|r| r.max_relative_error)
}

pub fn finite_diff_report<F>(f: F, params: &Params, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Params) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &Params, name: &str, idx: usize| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite objective while perturbing `{name}`[{idx}]"
            )));
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name)?.numel();
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&work, name, i)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&work, name, i)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;

            let g_fd = (up - down) / (2.0 * eps);
            let g_ad = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let rel = (g_ad - g_fd).abs() / g_fd.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
