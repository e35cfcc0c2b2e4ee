//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::{Bindings, Graph, NodeId};

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)` over
/// every coordinate of every bound input.
pub fn finite_diff_check(
    graph: &Graph,
    loss: NodeId,
    bindings: &Bindings,
    eps: f64,
) -> Result<f64> {
    let names: Vec<String> = graph.input_names().map(str::to_string).collect();
    finite_diff_detail(graph, loss, bindings, eps, &names).map(|c| c.max_rel_error)
}

/// Same as [`finite_diff_check`] restricted to the listed inputs, with the
/// offending coordinate reported.
pub fn finite_diff_detail(
    graph: &Graph,
    loss: NodeId,
    bindings: &Bindings,
    eps: f64,
    inputs: &[String],
) -> Result<GradCheck> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Invalid(format!("finite-difference step {eps} outside (0, 1e-3]")));
    }
    let values = graph.eval(bindings)?;
    let analytic: BTreeMap<String, _> = graph.backprop(&values, loss)?;
    let mut work = bindings.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        input: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for name in inputs {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Unbound(name.clone()))?;
        let n = grad.len();
        for i in 0..n {
            let orig = work.get(name).expect("bound").data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = graph.eval(&work)?[loss].item();
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = graph.eval(&work)?[loss].item();
            work.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst.coordinates += 1;
            if rel > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: rel,
                    input: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    coordinates: worst.coordinates,
                };
            }
        }
    }
    Ok(worst)
}
