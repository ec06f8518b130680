//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::graph::{GradMap, Graph, Var};
use super::params::{Bindings, ParameterSet};
use crate::error::{Error, Result};

/// Denominator floor for the relative error so that near-zero gradients are
/// compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per trainable parameter.
    pub per_parameter: BTreeMap<String, f64>,
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
    pub tolerance: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let out = f(&mut g, &b)?;
    g.value(out).item()
}

/// Analytic gradients of `f` at `params` (eval-mode graph).
pub fn analytic_gradients<F>(f: &F, params: &ParameterSet) -> Result<GradMap>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let out = f(&mut g, &b)?;
    Ok(g.backward(out)?.named())
}

/// Compares `analytic` against central differences of `f` for every
/// trainable parameter entry.
pub fn compare_gradients<F>(
    f: &F,
    params: &ParameterSet,
    analytic: &GradMap,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let base = evaluate(f, params)?;
    let again = evaluate(f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Numeric(format!(
            "objective is not deterministic: {base} vs {again}"
        )));
    }

    let mut work = params.clone();
    let mut per_parameter = BTreeMap::new();
    let mut worst = (0.0f64, None);
    let mut entries = 0;
    for name in params.trainable_names() {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for `{name}`")))?;
        let n = params.get(&name)?.numel();
        if grad.numel() != n {
            return Err(Error::shape("compare_gradients", format!("gradient of `{name}` has {} entries, parameter {n}", grad.numel())));
        }
        let mut max_err = 0.0f64;
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + step;
            let plus = evaluate(f, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - step;
            let minus = evaluate(f, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(relative_error(grad.data()[i], numeric));
            entries += 1;
        }
        if max_err >= worst.0 {
            worst = (max_err, Some(name.clone()));
        }
        per_parameter.insert(name, max_err);
    }
    Ok(GradCheckReport {
        per_parameter,
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        tolerance,
        entries_checked: entries,
    })
}

/// Backward pass followed by [`compare_gradients`].
pub fn finite_difference_check<F>(
    f: F,
    params: &ParameterSet,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(&f, params, &analytic, step, tolerance)
}
