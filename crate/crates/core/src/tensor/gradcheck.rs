//! Central finite-difference gradient checking in double precision.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Comparison of analytic and numeric gradients for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Relative error between two gradient vectors, measured in the 2-norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Evaluate `f` on fresh tapes and compare the tape's gradient of the scalar
/// output against central differences with the given `step`, for every
/// input in `inputs`.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut results = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[idx].shape());
        let mut numeric = vec![0.0; inputs[idx].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[idx].data()[j];
            probe[idx].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[idx].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[idx].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = analytic.data();
        results.push(GradComparison {
            rel_err: relative_error(a, &numeric),
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            numeric_norm: numeric.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(results)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Gradient(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
