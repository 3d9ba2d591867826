//! Whole-batch loss recorded on one tape, with every image sharing the
//! same bound parameter handles. Used as the reference for the per-image
//! fan-out in the trainer.
#![allow(dead_code)]

use bgg_core::loss::symmetric_loss;
use bgg_core::{BggModel, Result, Tape, TemperatureParam, Tensor, Var};

/// Symmetric loss over aligned `(query, reference)` pairs; `bind` decides
/// how trainable tensor `j` enters the tape and is called once per tensor.
pub fn batch_loss(
    tape: &mut Tape,
    model: &BggModel,
    pairs: &[(Tensor, Tensor)],
    mut bind: impl FnMut(&mut Tape, usize, &Tensor) -> Var,
) -> Result<(Var, Vec<Var>)> {
    let shared: Vec<Var> = model
        .trainable
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(j, x)| bind(tape, j, x))
        .collect();
    let b = pairs.len();
    let dim = model.config.descriptor_dim();
    let mut zq = Vec::with_capacity(b);
    let mut zr = Vec::with_capacity(b);
    for (q, r) in pairs {
        zq.push(model.describe_on_tape(tape, q, |_, j, _| shared[j])?.z);
        zr.push(model.describe_on_tape(tape, r, |_, j, _| shared[j])?.z);
    }
    let q = tape.concat(&zq, 0)?;
    let q = tape.reshape(q, [b, dim])?;
    let r = tape.concat(&zr, 0)?;
    let r = tape.reshape(r, [b, dim])?;
    let free = *shared.last().expect("temperature is the last trainable tensor");
    let inv = TemperatureParam::inverse_on_tape(tape, free)?;
    Ok((symmetric_loss(tape, q, r, inv)?, shared))
}

/// Scalar loss as a function of trainable tensor `which`.
pub fn loss_wrt(tape: &mut Tape, x: Var, model: &BggModel, pairs: &[(Tensor, Tensor)], which: usize) -> Result<Var> {
    Ok(batch_loss(tape, model, pairs, |t, j, v| if j == which { x } else { t.constant(v) })?.0)
}
