//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, NodeId};
use super::params::Params;
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`,
/// where `numeric` is the central difference of `f` at `point`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{} coordinates, {} gradient entries", point.len(), analytic.len()),
        ));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x)?;
        x[i] = orig - step;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Checks the gradient of a scalar graph with respect to every entry of
/// `params`. `build` registers the parameters (via [`Graph::param_from`])
/// and returns the scalar output node.
pub fn check_params<B>(build: B, params: &Params, step: f64) -> Result<f64>
where
    B: Fn(&mut Graph, &Params) -> Result<NodeId>,
{
    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, p)?;
        Ok(g.run(out)?.item())
    };

    let mut g = Graph::new();
    let out = build(&mut g, params)?;
    g.forward(&[])?;
    let grads = g.backward(out)?;

    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut point = Vec::new();
    let mut analytic = Vec::new();
    for name in &names {
        let t = params.get(name).expect("name from the same set");
        point.extend_from_slice(t.data());
        match grads.param(name) {
            Some(gt) => analytic.extend_from_slice(gt.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    let unflatten = |flat: &[f64]| -> Params {
        let mut p = params.clone();
        let mut off = 0;
        for name in &names {
            let t = p.get_mut(name).expect("same names");
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        p
    };

    finite_diff_check(|x| eval(&unflatten(x)), &point, &analytic, step)
}
