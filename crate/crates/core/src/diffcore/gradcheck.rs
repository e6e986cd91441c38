use super::graph::{ParamGraph, ParamId, Var};
use crate::error::Result;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of a scalar loss with central finite
/// differences of step `h`.
///
/// `loss` records the loss on a fresh tape and must be a deterministic
/// function of the parameter values. The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`; `floor` keeps
/// entries whose true gradient is essentially zero from dominating.
/// Parameter values are restored and gradients left zeroed on return.
pub fn check_gradients<F>(graph: &mut ParamGraph, params: &[ParamId], h: f64, floor: f64, mut loss: F) -> Result<GradCheck>
where
    F: FnMut(&mut ParamGraph) -> Result<Var>,
{
    graph.zero_grads(params);
    graph.reset_tape();
    let l = loss(graph)?;
    graph.backward(l)?;
    graph.reset_tape();
    let analytic: Vec<Vec<f64>> = params.iter().map(|&p| graph.param_grad(p).data().to_vec()).collect();
    graph.zero_grads(params);

    let mut eval = |graph: &mut ParamGraph| -> Result<f64> {
        graph.reset_tape();
        let l = loss(graph)?;
        let v = graph.value(l).item();
        graph.reset_tape();
        Ok(v)
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        entries_checked: 0,
    };
    for (pi, &p) in params.iter().enumerate() {
        let original = graph.param_value(p).clone();
        for k in 0..original.len() {
            let mut t = original.clone();
            t.data_mut()[k] = original.data()[k] + h;
            graph.set_param_value(p, t.clone())?;
            let up = eval(graph)?;
            t.data_mut()[k] = original.data()[k] - h;
            graph.set_param_value(p, t)?;
            let down = eval(graph)?;
            graph.set_param_value(p, original.clone())?;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.entries_checked += 1;
            if out.worst.is_empty() || err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = format!("{}[{k}]", graph.param_name(p));
            }
        }
    }
    Ok(out)
}
