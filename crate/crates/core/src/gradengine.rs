//! Loss and gradient evaluation for every architecture.
//!
//! Losses are the batch mean of squared residuals. All reductions run in a
//! fixed sequential order (row-major, first index outermost), so a given
//! `(params, batch)` pair always produces the same bits.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{forward, Bound, Gradients, ModelConfig, Parameters};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn check_batch(cfg: &ModelConfig, params: &Parameters, inputs: &Tensor, targets: &[f64]) -> Result<()> {
    if params.arch != cfg.arch {
        return Err(Error::shape(format!(
            "parameters are for {} but config is {}",
            params.arch, cfg.arch
        )));
    }
    if inputs.ndim() != 2 || inputs.cols() != cfg.lookback {
        return Err(Error::shape(format!(
            "inputs {:?} do not match lookback {}",
            inputs.shape(),
            cfg.lookback
        )));
    }
    if inputs.rows() != targets.len() || targets.is_empty() {
        return Err(Error::shape(format!(
            "{} input rows vs {} targets",
            inputs.rows(),
            targets.len()
        )));
    }
    Ok(())
}

/// Mean squared error of the model on `(inputs, targets)`.
pub fn forward_loss(cfg: &ModelConfig, params: &Parameters, inputs: &Tensor, targets: &[f64]) -> Result<f64> {
    check_batch(cfg, params, inputs, targets)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let x = tape.constant(inputs.clone());
    let y = forward(cfg, &mut tape, &bound, x)?;
    let loss = tape.mse(y, targets)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and its exact reverse-mode gradient with respect to every parameter.
pub fn grad(
    cfg: &ModelConfig,
    params: &Parameters,
    inputs: &Tensor,
    targets: &[f64],
) -> Result<(f64, Gradients)> {
    check_batch(cfg, params, inputs, targets)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let x = tape.constant(inputs.clone());
    let y = forward(cfg, &mut tape, &bound, x)?;
    let loss = tape.mse(y, targets)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    let mut all = tape.backward(loss)?;
    let mut out = IndexMap::with_capacity(params.len());
    for ((name, t), v) in params.iter().zip(bound.vars()) {
        // a parameter that never reached the loss has a zero gradient
        let g = all[v.index()].take().unwrap_or_else(|| Tensor::zeros(t.shape()));
        if !g.is_finite() {
            return Err(Error::Numeric { layer: name.to_string() });
        }
        out.insert(name.to_string(), g);
    }
    Ok((value, Gradients(out)))
}

/// Flat gradient, in parameter order, at the flat point `theta`.
pub fn flat_grad(
    cfg: &ModelConfig,
    template: &Parameters,
    theta: &[f64],
    inputs: &Tensor,
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let p = template.with_flat(theta)?;
    let (l, g) = grad(cfg, &p, inputs, targets)?;
    Ok((l, g.flatten()))
}
