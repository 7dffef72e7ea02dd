//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::nn::Mode;
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function `f` at `x` against central
/// differences with the given `step`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let loss = f(&mut tape, input)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(input).expect("input is a parameter");

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Finite-difference check of every adapter matrix in `model` through the whole
/// forward pass, in train mode with a dropout mask fixed by `seed`.
///
/// The loss is the mean squared distance of the output to a fixed random target.
/// Returns the worst error over all sites and both adapter matrices.
pub fn adapter_gradient_check(model: &Model, batch: Batch<'_>, seed: u64, step: f64) -> Result<f64> {
    if model.adapters().is_empty() {
        return Err(Error::Config("no adapter injected".into()));
    }
    let out = model.forward(batch, Mode::Eval, &mut RngState::new(seed, streams::DROPOUT))?;
    let rows = out.len() / out.shape().last().copied().unwrap_or(1);
    let target = RngState::new(seed, streams::PROBE).normal_tensor(&[rows, out.len() / rows.max(1)], 1.0);

    let mut worst = 0.0_f64;
    for (&site, adapter) in model.adapters() {
        for which in 0..2 {
            let x = if which == 0 { &adapter.state.w_up } else { &adapter.state.w_down };
            let err = finite_difference_check(
                |tape, v| {
                    let mut vars = model.adapter_vars(tape, false);
                    let entry = vars.get_mut(&site).expect("site is present");
                    if which == 0 {
                        entry.0 = v;
                    } else {
                        entry.1 = v;
                    }
                    let mut rng = RngState::new(seed, streams::DROPOUT);
                    let fwd = model.forward_on_tape(tape, batch, &vars, Mode::Train, &mut rng, false)?;
                    let t = tape.constant(target.clone());
                    tape.mse(fwd.output, t)
                },
                x,
                step,
            )?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_difference_check(
            |t, _| {
                let c = t.constant(Tensor::scalar(4.0));
                t.sum(c)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_difference_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
