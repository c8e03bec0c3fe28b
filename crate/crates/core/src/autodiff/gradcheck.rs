//! Central finite-difference check of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for relative errors, so gradients that are exactly
/// zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|a - n| / max(|a|, |n|)` over each parameter's whole gradient, in
    /// input order. This is what [`GradCheckReport::passed`] compares.
    pub rel_err: Vec<f64>,
    /// Worst single-entry relative error per parameter. Entries far smaller
    /// than the rest of their gradient pick up `O(step^2)` truncation error
    /// that says nothing about correctness, so this is diagnostic only.
    pub max_entry_err: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Euclidean-norm relative error between two gradients.
pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with the given `step`.
///
/// `f` receives a fresh tape and one parameter node per entry of `params`
/// and must return a `1 x 1` node.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut work = params.to_vec();
    let mut rel_err = Vec::with_capacity(params.len());
    let mut max_entry_err = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut worst: f64 = 0.0;
        let mut numeric_grad = Vec::with_capacity(params[k].len());
        for i in 0..params[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
            numeric_grad.push(numeric);
        }
        rel_err.push(norm_relative_error(analytic[k].data(), &numeric_grad));
        max_entry_err.push(worst);
    }
    Ok(GradCheckReport {
        rel_err,
        max_entry_err,
        tolerance: tol,
    })
}
