//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only evaluates the forward function; it never reads the
//! gradient rules it is checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest entrywise relative error over all inputs.
    pub max_rel_error: f64,
    /// Largest absolute gradient seen in the finite-difference estimate.
    pub scale: f64,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

/// Relative error of one entry. The denominator is floored at 1e-6 of the
/// overall gradient scale so entries that are zero up to rounding do not
/// dominate.
pub fn rel_error(a: f64, n: f64, scale: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6 * scale).max(1e-12);
    (a - n).abs() / denom
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).expect("every input requires grad"))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        numeric.push(g);
    }

    let scale = numeric
        .iter()
        .chain(&analytic)
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| rel_error(a, n, scale))
        .fold(0.0, f64::max);

    Ok(GradReport {
        max_rel_error,
        scale,
        analytic,
        numeric,
    })
}
