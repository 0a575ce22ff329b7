//! Central finite-difference verification of engine gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing autodiff gradients with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// (parameter tensor, element) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of one parameter tensor.
///
/// `f` records the function on a fresh graph, given the parameter's node,
/// and returns the scalar output node.
pub fn grad_check<F>(f: F, params: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(params), h)
}

/// Like [`grad_check`] for functions of several parameter tensors.
pub fn grad_check_many<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    check_finite(g.value(out))?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).map_or_else(|| vec![0.0; p.len()], |s| s.to_vec()))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        check_finite(g.value(out))?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.coordinates == 1 {
                report.max_relative_error = err;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::Dimension(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    if !t.data()[0].is_finite() {
        return Err(Error::Evaluation("function value is not finite".into()));
    }
    Ok(())
}
