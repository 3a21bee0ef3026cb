//! Whole-model comparison of reverse-mode gradients against central differences.

use dualpath_tensor::{relative_error, BackwardFault, NormMode, Tape, Tensor};
use rayon::prelude::*;
use serde::Serialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{mse_loss, Batch, Model};

/// Largest distance between a target and the model's prediction in [`check_problem`].
pub const TARGET_SPREAD: f64 = 0.02;

/// Name of the group holding the gradient with respect to the input spectrogram.
pub const SPECTROGRAM_GROUP: &str = "input.spectrogram";

#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    /// Autodiff and finite-difference values at the worst element.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Eval-mode MSE loss with the given parameter values and spectrogram.
fn loss_at(model: &Model, batch: &Batch, target: &Tensor, values: &[Tensor], spec: Option<&Tensor>) -> Result<f64> {
    let tape = Tape::new();
    let ctx = model.ctx_with(&tape, values, NormMode::Eval, false);
    let out = match spec {
        Some(s) => model.forward_with_spectrogram(&ctx, batch, tape.constant(s.clone()))?,
        None => model.forward(&ctx, batch)?,
    };
    let loss = mse_loss(out.scores, tape.constant(target.clone()))?;
    let v = loss.value().item()?;
    if !v.is_finite() {
        return Err(Error::Tensor(dualpath_tensor::TensorError::NonFinite { op: "grad_check" }));
    }
    Ok(v)
}

/// One result per parameter tensor, plus the spectrogram when the model reads one.
///
/// `fault` corrupts the backward pass, for checking that the harness notices.
pub fn model_grad_check(
    model: &Model,
    batch: &Batch,
    target: &Tensor,
    eps: f64,
    fault: Option<BackwardFault>,
) -> Result<Vec<GroupResult>> {
    let values = model.params().values();
    let spec = batch.spectrogram.as_ref().filter(|_| model.config().modalities.dynamics);

    let tape = Tape::new();
    tape.set_backward_fault(fault);
    let ctx = model.ctx(&tape, NormMode::Eval, true);
    let spec_var = spec.map(|s| tape.leaf(s.clone()));
    let out = match spec_var {
        Some(s) => model.forward_with_spectrogram(&ctx, batch, s)?,
        None => model.forward(&ctx, batch)?,
    };
    let loss = mse_loss(out.scores, tape.constant(target.clone()))?;
    let grads = tape.backward(loss)?;
    let mut analytic = ctx.param_grads(&grads);
    if let Some(s) = spec_var {
        analytic.push(grads.wrt(s));
    }

    let n_params = values.len();
    let jobs: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(g, t)| (0..t.len()).map(move |i| (g, i)))
        .collect();
    let errors: Vec<Result<(usize, f64, f64, f64)>> = jobs
        .par_iter()
        .map(|&(g, i)| {
            let probe = |delta: f64| -> Result<f64> {
                if g < n_params {
                    let mut vals = values.to_vec();
                    vals[g].data_mut()[i] += delta;
                    loss_at(model, batch, target, &vals, spec)
                } else {
                    let mut s = spec.expect("spectrogram group").clone();
                    s.data_mut()[i] += delta;
                    loss_at(model, batch, target, values, Some(&s))
                }
            };
            let fd = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let ad = analytic[g].data()[i];
            Ok((g, relative_error(ad, fd), ad, fd))
        })
        .collect();

    let mut names: Vec<String> = model.params().names().to_vec();
    if spec.is_some() {
        names.push(SPECTROGRAM_GROUP.to_string());
    }
    let mut results: Vec<GroupResult> = names
        .into_iter()
        .zip(&analytic)
        .map(|(name, t)| GroupResult {
            name,
            elements: t.len(),
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        })
        .collect();
    for e in errors {
        let (g, err, ad, fd) = e?;
        let r = &mut results[g];
        if err > r.max_rel_err {
            r.max_rel_err = err;
            r.worst_analytic = ad;
            r.worst_numeric = fd;
        }
    }
    Ok(results)
}

/// Standard-normal inputs of one video and targets within [`TARGET_SPREAD`]
/// of the current predictions.
///
/// Near-zero residuals keep finite-difference roundoff, which scales with
/// the residual, below the `1e-8` floor of [`relative_error`].
pub fn check_problem(model: &Model, t_f: usize, frames: usize, seed: u64) -> Result<(Batch, Tensor)> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.sample(StandardNormal));
    let batch = Batch {
        visual: Some(normal(&[1, t_f, cfg.d_v])),
        semantic: Some(normal(&[1, t_f, cfg.d_s])),
        spectrogram: Some(normal(&[1, cfg.n_mels, frames])),
        t_f,
    };
    let mut target = model.predict(&batch)?;
    for y in target.data_mut() {
        *y = (*y + rng.random_range(-TARGET_SPREAD..TARGET_SPREAD)).clamp(0.0, 1.0);
    }
    Ok((batch, target))
}
