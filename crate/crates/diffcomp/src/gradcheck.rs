//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::store::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so components whose true
/// gradient is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn compare(analytic: &[f64], mut eval: impl FnMut(usize, f64) -> Result<f64>, step: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval(i, step)?;
        let minus = eval(i, -step)?;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Largest component-wise relative error between the reverse-mode gradient
/// of scalar `f` at `input` and central differences with spacing `step`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = f(&tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    compare(
        &analytic,
        |i, delta| {
            let mut shifted = input.clone();
            shifted.data_mut()[i] += delta;
            let tape = Tape::new();
            let x = tape.constant(shifted);
            f(&tape, x)?.item()
        },
        step,
    )
}

/// Same check, with respect to one tensor of a parameter store.
pub fn grad_check_param<F>(store: &ParamStore<f64>, id: ParamId, f: F, step: f64) -> Result<f64>
where
    F: for<'s, 't> Fn(&'t Tape<f64>, &Bound<'s, 't, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let y = f(&tape, &bound)?;
    let grads = tape.backward(y)?;
    let n = store.value(id).numel();
    let analytic = grads
        .for_param(store, id)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; n]);
    let mut probe = store.clone();
    compare(
        &analytic,
        |i, delta| {
            let mut shifted = store.value(id).clone();
            shifted.data_mut()[i] += delta;
            probe.set_value(id, shifted)?;
            let tape = Tape::new();
            let bound = probe.bind(&tape, false);
            f(&tape, &bound)?.item()
        },
        step,
    )
}
