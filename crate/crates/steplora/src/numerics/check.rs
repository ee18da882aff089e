//! Loss evaluation, gradient extraction, and the finite-difference oracle.
//!
//! A loss is any closure that builds a 1x1 tape expression from the current
//! store contents. [`loss_and_grads`] runs it once and accumulates analytic
//! gradients; [`finite_diff_check`] re-evaluates it under central-difference
//! perturbations of every trainable scalar and reports the worst relative
//! disagreement. The numeric side never touches the reverse pass, so the two
//! routes stay independent.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

pub trait LossFn: Fn(&mut Tape, &ParamStore) -> Result<Var> {}
impl<F: Fn(&mut Tape, &ParamStore) -> Result<Var>> LossFn for F {}

/// Evaluate the loss without touching gradients.
pub fn loss_value<F: LossFn>(store: &ParamStore, loss_fn: &F) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
        });
    }
    Ok(v)
}

/// Evaluate the loss and accumulate gradients for every trainable tensor the
/// expression touches. Gradients add onto whatever is already in the buffers;
/// callers zero them between steps.
pub fn loss_and_grads<F: LossFn>(store: &mut ParamStore, loss_fn: &F) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
        });
    }
    let grads = tape.backward(loss)?;
    tape.accumulate_into_store(&grads, store)?;
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub scalars_checked: usize,
}

/// Compare analytic gradients against central differences
/// `(f(w+h) - f(w-h)) / 2h` for every trainable scalar.
///
/// The per-scalar relative error is `|analytic - numeric| / max(1, |numeric|)`;
/// the report carries the maximum over all scalars. The caller asserts it
/// against a tolerance.
pub fn finite_diff_check<F: LossFn>(
    store: &mut ParamStore,
    step: f64,
    loss_fn: &F,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::InvalidArg("finite-difference step must be > 0".into()));
    }

    store.zero_grads();
    loss_and_grads(store, loss_fn)?;

    let names = store.trainable_names();
    let mut analytic = Vec::new();
    for name in &names {
        analytic.push(store.grad(name)?.clone());
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        scalars_checked: 0,
    };

    for (name, grad) in names.iter().zip(&analytic) {
        let len = store.value(name)?.len();
        for idx in 0..len {
            let original = store.value(name)?.data()[idx];

            store.get_mut(name)?.value.data_mut()[idx] = original + step;
            let f_plus = loss_value(store, loss_fn)?;
            store.get_mut(name)?.value.data_mut()[idx] = original - step;
            let f_minus = loss_value(store, loss_fn)?;
            // restore the exact original bits
            store.get_mut(name)?.value.data_mut()[idx] = original;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let rel = (grad.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.scalars_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
