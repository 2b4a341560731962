//! Central finite-difference verification of recorded gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default step for double-precision checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// A scalar-valued tensor function: records its graph on the tape and returns
/// the loss variable.
pub trait ScalarFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> ScalarFn for F {}

fn run_scalar<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar function, got output shape {:?}",
            tape.shape(loss)
        )));
    }
    if !tape.value(loss).is_finite() {
        return Err(Error::Contract("grad_check function produced a non-finite value".into()));
    }
    Ok((tape, vars, loss))
}

/// Gradients from one reverse pass.
pub fn analytic_gradients<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let (mut tape, vars, loss) = run_scalar(f, inputs)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| {
            tape.grad_tensor(v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Central differences, one forward pair per input element.
pub fn numeric_gradients<F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<Tensor<f64>>> {
    if h <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[p].shape().to_vec());
        for i in 0..inputs[p].numel() {
            let mut bumped: Vec<Tensor<f64>> = inputs.to_vec();
            bumped[p].values_mut()[i] += h;
            let (tape, _, loss) = run_scalar(f, &bumped)?;
            let plus = tape.value(loss).values()[0];

            bumped[p].values_mut()[i] -= 2.0 * h;
            let (tape, _, loss) = run_scalar(f, &bumped)?;
            let minus = tape.value(loss).values()[0];

            g.values_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `max over elements of |analytic - numeric| / max(1, |analytic|)`.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (&av, &nv) in a.values().iter().zip(n.values().iter()) {
            let err = (av - nv).abs() / av.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Compares recorded gradients against central differences and returns the
/// worst relative error over all input elements.
pub fn grad_check<F: ScalarFn>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, h)?;
    for g in analytic.iter().chain(numeric.iter()) {
        if !g.is_finite() {
            return Err(Error::Contract("grad_check produced a non-finite gradient".into()));
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Deterministic test tensors.
pub fn seeded_tensor<T: Scalar>(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<T> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(rng.random_range(-scale..scale)))
        .collect();
    Tensor::new(shape, data).expect("seeded tensor shape")
}
