//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|ad - fd| / max(|ad|, |fd|, 1e-8)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

/// Largest [`relative_error`] over corresponding elements.
pub fn max_relative_error(ad: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(ad.shape(), fd.shape(), "gradient shapes differ");
    ad.data()
        .iter()
        .zip(fd.data())
        .map(|(&a, &f)| relative_error(a, f))
        .fold(0.0, f64::max)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every element.
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.value().item()
}

/// Max relative error between tape and finite-difference gradients of a
/// scalar function, one entry per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let ad = grads.wrt(*v);
        if !ad.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let mut current = inputs.to_vec();
        let fd = central_difference(
            |x| {
                current[i] = x.clone();
                eval_scalar(&f, &current)
            },
            &inputs[i],
            eps,
        )?;
        errors.push(max_relative_error(&ad, &fd));
    }
    Ok(errors)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}
