//! Central finite-difference check of tape gradients.

use std::collections::BTreeMap;

use super::graph::{Bindings, Graph, Var};
use super::{NeuralError, ParameterSet};

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; keeps round-off in the
/// numerical estimate from dominating near-zero components.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

/// Compare reverse-mode gradients of a scalar loss with central
/// differences for every element of every parameter.
pub fn grad_check<F, E>(params: &ParameterSet, step: f64, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var, E>,
    E: From<NeuralError>,
{
    let eval = |p: &ParameterSet| -> Result<f64, E> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let loss = f(&mut g, &b)?;
        Ok(g.scalar(loss))
    };
    let mut g = Graph::new();
    let b = g.bind(params);
    let loss = f(&mut g, &b)?;
    let analytic = g.backward(loss).for_bindings(&b);

    let mut per_param = BTreeMap::new();
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let mut worst_here: f64 = 0.0;
        let cols = t.value.ncols();
        for idx in 0..t.value.len() {
            let at = (idx / cols, idx % cols);
            let orig = t.value[at];
            work.get_mut(name).unwrap().value[at] = orig + step;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().value[at] = orig - step;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().value[at] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(name).map_or(0.0, |g| g[at]);
            let rel = relative_error(a, numeric);
            worst_here = worst_here.max(rel);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((name.to_string(), idx));
            }
        }
        per_param.insert(name.to_string(), worst_here);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        worst,
    })
}
