//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::numcore::{Fault, ParamStore, Tape, Tensor, Var};

/// Below this magnitude relative error is measured against the floor instead
/// of the gradient itself.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn summarize(errors: impl Iterator<Item = f64>, tol: f64) -> GradCheckReport {
    let mut worst = (0, 0.0);
    let mut n = 0;
    for (i, e) in errors.enumerate() {
        n += 1;
        if e > worst.1 || e.is_nan() {
            worst = (i, e);
        }
    }
    GradCheckReport { max_rel_err: worst.1, worst_index: worst.0, checked: n, pass: worst.1 <= tol }
}

/// Checks the gradient of scalar `f` at `point`. Errors inside `f` are
/// returned; gradient mismatches are reported, not raised.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t)?;
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut errors = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        errors.push(relative_error(analytic.data()[i], numeric));
    }
    Ok(summarize(errors.into_iter(), tol))
}

/// Per-parameter result of [`grad_check_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks every coordinate of every parameter in `store` against central
/// differences of `loss`. `loss` must be deterministic (no dropout).
pub fn grad_check_params<F>(
    store: &ParamStore,
    loss: F,
    step: f64,
    tol: f64,
    fault: Option<Fault>,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        if let Some(fault) = fault {
            tape = tape.with_fault(fault);
        }
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };

    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let zero = Tensor::zeros(store.get(id).shape());
        let analytic = grads.param(id).unwrap_or(&zero);
        let mut errors = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            errors.push(relative_error(analytic.data()[i], (up - down) / (2.0 * step)));
        }
        out.push(ParamCheck { name: store.name(id).to_string(), report: summarize(errors.into_iter(), tol) });
    }
    Ok(out)
}
