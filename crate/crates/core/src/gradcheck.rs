//! Central finite-difference checks for analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
///
/// The denominator is floored at 1e-6, above the rounding noise of a central
/// difference with step 1e-5, so that gradients that are zero in exact
/// arithmetic (the key bias of attention, for one) compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(GRADIENT_FLOOR);
    diff / scale
}

/// `∂f/∂x` by central differences with step `h`.
pub fn numeric_gradient(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares backward against central differences for every input of `f`.
///
/// `f` receives one requires-grad leaf per input and must return a
/// one-element tensor. Returns one relative error per input.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&tape, &vars)?;
        tape.item(out)
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("backward ran");
        let mut values = inputs.to_vec();
        let numeric = numeric_gradient(&inputs[i], DEFAULT_STEP, |probe| {
            values[i] = probe.clone();
            eval(&values)
        })?;
        errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(errors)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub relative_error: f64,
}

/// Finite-difference check of parameter gradients.
///
/// At most `max_coords` evenly spaced coordinates of each parameter are
/// perturbed (all of them when the parameter is smaller). `f` builds the loss
/// from the store on a fresh tape and must be deterministic.
pub fn check_params(
    store: &mut ParamStore<f64>,
    max_coords: usize,
    f: impl Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<Vec<ParamCheck>> {
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    tape.backward(loss)?;
    store.zero_grad();
    store.accumulate(&tape)?;

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.get(id).value.len();
        let stride = len.div_ceil(max_coords.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for coord in (0..len).step_by(stride) {
            analytic.push(store.get(id).grad.data()[coord]);
            let orig = store.get(id).value.data()[coord];
            let mut eval_at = |v: f64| -> Result<f64> {
                store.get_mut(id).value.data_mut()[coord] = v;
                let tape = Tape::new();
                let loss = f(&tape, store)?;
                tape.item(loss)
            };
            let plus = eval_at(orig + DEFAULT_STEP)?;
            let minus = eval_at(orig - DEFAULT_STEP)?;
            store.get_mut(id).value.data_mut()[coord] = orig;
            numeric.push((plus - minus) / (2.0 * DEFAULT_STEP));
        }
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            checked: analytic.len(),
            relative_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}
