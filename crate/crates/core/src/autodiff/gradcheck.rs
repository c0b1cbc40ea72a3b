//! Central finite-difference oracle for analytic gradients.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences, one coordinate at a time.
///
/// `builder` must deterministically construct the same scalar loss from the
/// leaves it is handed. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8); the maximum over all coordinates of all
/// inputs is returned.
pub fn grad_check<F>(builder: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("grad_check step must be > 0, got {h}")));
    }

    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = points.iter().map(|t| g.param(t.clone())).collect();
        let loss = builder(&mut g, &ids)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::Contract(
                "grad_check builder must produce a scalar".into(),
            ));
        }
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss value {v} while probing")));
        }
        Ok(v)
    };

    // analytic pass
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = builder(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Contract(
            "grad_check builder must produce a scalar".into(),
        ));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| g.grad(id).expect("grad populated").clone())
        .collect();

    let mut max_rel: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[ti].data_mut()[k] = orig + h;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - h;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite-difference quotient at input {ti}, coordinate {k}"
                )));
            }
            let ana = analytic[ti].data()[k];
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            let rel = (ana - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
