//! Central-difference gradient checking in 64-bit precision.

use crate::autodiff::param::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(store: &ParamStore<f64>, build: &mut F) -> Result<f64>
where
    F: for<'a> FnMut(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::inference(store);
    let root = build(&mut tape)?;
    Ok(tape.item(root))
}

/// Compares the tape gradient of `build`'s scalar output against central
/// differences for every coordinate of every parameter in `store`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, epsilon: f64, mut build: F) -> Result<GradCheckReport>
where
    F: for<'a> FnMut(&mut Tape<'a, f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let root = build(&mut tape)?;
        let loss = tape.item(root);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss at the unperturbed point".into()));
        }
        tape.backward(root)?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + epsilon;
            let plus = eval(store, &mut build);
            store.value_mut(id).data_mut()[k] = orig - epsilon;
            let minus = eval(store, &mut build);
            store.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at {}[{k}] ± {epsilon} (value {orig})",
                    store.get(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.get(id).map(|g| g.data()[k]).unwrap_or(0.0);
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.param.is_empty() {
                report.max_rel_error = err;
                report.param = store.get(id).name.clone();
                report.index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
