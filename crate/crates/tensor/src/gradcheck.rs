//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: max |analytic − numeric| / max(max |numeric|, 1e-6).
    pub rel_errors: Vec<f64>,
    pub evaluations: usize,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences with step `h`, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("gradcheck", "step must be positive"));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs = values
            .iter()
            .map(|v| t.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let l = f(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut values = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut evaluations = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + h;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - h;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
            evaluations += 2;
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        rel_errors.push(err / scale);
    }
    Ok(GradReport {
        rel_errors,
        evaluations,
    })
}
