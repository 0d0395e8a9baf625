//! Central finite-difference check of parameter gradients.

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Parameter name and element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares backprop against central differences with step `h` for every
/// scalar of every parameter. `loss` must build a scalar on the tape.
pub fn check_params<F>(params: &ParamStore<f64>, loss: F, h: f64, floor: f64) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = loss(&mut tape)?;
        Ok(tape.value(out).data()[0])
    };
    let analytic = {
        let mut tape = Tape::new(params);
        let out = loss(&mut tape)?;
        tape.backward(out).into_param_grads()
    };
    let mut report = GradCheck { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut store = params.clone();
    for id in params.ids() {
        let n = params.get(id).numel();
        for i in 0..n {
            let orig = params.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = value(&store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = value(&store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
