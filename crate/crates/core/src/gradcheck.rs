//! Central-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the analytic gradient of `f` and
/// `(f(theta + eps) - f(theta - eps)) / (2 eps)` over every entry of every
/// parameter. An empty parameter list yields 0.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(params)?;
    let grads = graph.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.iter().map(Tensor::to_owned_tensor).collect();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for j in 0..params[pi].numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let (g1, _, o1) = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let (g2, _, o2) = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (g1.value(o1).data()[0] - g2.value(o2).data()[0]) / (2.0 * eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
