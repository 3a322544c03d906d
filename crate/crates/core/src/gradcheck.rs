//! Central finite-difference checking of tape gradients.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error of an analytic gradient against a numeric one.
///
/// Each component is measured against the larger of its own magnitudes and
/// 1e-3 of the largest numeric component, so components that are tiny
/// relative to the gradient's scale are judged on that scale.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// Fixed projection weights turning a non-scalar output into a scalar loss.
pub fn probe_weights(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| {
        let x = i as f64;
        0.5 + (0.37 * x + 0.11).sin() * 0.9 + 0.2 * (1.3 * x).cos()
    })
}

fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        Ok(out)
    } else {
        let w = probe_weights(tape.value(out).numel());
        tape.weighted_sum(out, &w)
    }
}

/// Compares analytic input gradients of `f` against central differences.
/// Returns the worst relative error over all inputs.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_inputs_with(inputs, h, &f, |_, g| g)
}

/// Like [`check_inputs`] but lets the caller tamper with analytic gradients
/// (used to prove that a broken op is detected).
pub fn check_inputs_with<F, T>(inputs: &[Tensor], h: f64, f: &F, tamper: T) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    T: Fn(usize, Tensor) -> Tensor,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    let grads = tape.gradients(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = scalarize(&mut tape, out)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].dims()));
        let analytic = tamper(i, analytic);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Checks gradients accumulated into `ids` by a forward pass over `store`,
/// scoring all of them as one concatenated gradient vector.
/// `forward` must be deterministic in the store's values.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, forward: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = forward(&mut tape, store)?;
    let loss = scalarize(&mut tape, out)?;
    tape.backward(loss, store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let out = forward(&mut tape, store)?;
        let loss = scalarize(&mut tape, out)?;
        Ok(tape.value(loss).item())
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in ids {
        analytic.extend_from_slice(store.grad(id).data());
        for j in 0..store.value(id).numel() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let worst = rel_err(&analytic, &numeric);
    store.zero_grads();
    Ok(worst)
}
