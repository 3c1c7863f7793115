//! Central finite-difference oracle for reverse-mode gradients.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so entries whose true gradient is near zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        GradCheckReport {
            checked: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            worst: None,
            tolerance,
            passed: true,
        }
    }
}

/// Compares the reverse-mode gradient of scalar `f` at `inputs` with
/// `(f(x+eps) - f(x-eps)) / (2 eps)` element by element.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::Param(format!("eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value}")));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut report = GradCheckReport::new(tol);
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let base = input.data()[idx];
            probe[which].data_mut()[idx] = base + eps;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[idx] = base - eps;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[idx] = base;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((which, idx));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let v = f(&tape, &vars)?.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v} during differencing")));
    }
    Ok(v)
}
