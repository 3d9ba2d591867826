//! Symmetric InfoNCE over batch-aligned descriptor pairs.

use crate::autodiff::{Tape, Var};
use crate::error::{BggError, Result};
use crate::tensor::Tensor;

/// Temperature at initialization.
pub const TAU_INIT: f64 = 0.07;

/// Learnable temperature `τ = TAU_INIT · exp(s)` over a free scalar `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureParam {
    /// `[1]`, trainable.
    pub free: Tensor,
}

impl Default for TemperatureParam {
    fn default() -> Self {
        temperature_init()
    }
}

pub fn temperature_init() -> TemperatureParam {
    TemperatureParam {
        free: Tensor::zeros([1]).trainable(),
    }
}

impl TemperatureParam {
    pub fn from_free(s: f64) -> Result<Self> {
        Ok(Self {
            free: Tensor::new([1], vec![s])?.trainable(),
        })
    }

    /// Exposed `τ > 0`.
    pub fn tau(&self) -> f64 {
        TAU_INIT * self.free.data()[0].exp()
    }

    /// `1/τ` on the tape as a function of the bound free scalar.
    pub fn inverse_on_tape(tape: &mut Tape, free: Var) -> Result<Var> {
        let neg = tape.scale(free, -1.0)?;
        let e = tape.exp(neg)?;
        tape.scale(e, 1.0 / TAU_INIT)
    }
}

/// `S[i][j] = ⟨qᵢ, rⱼ⟩` for row-stacked `[B, E]` descriptors.
pub fn similarity_matrix(tape: &mut Tape, q: Var, r: Var) -> Result<Var> {
    let (sq, sr) = (tape.shape(q).to_vec(), tape.shape(r).to_vec());
    if sq.len() != 2 || sq != sr {
        return Err(BggError::dim("similarity_matrix", format!("{sq:?} vs {sr:?}")));
    }
    let rt = tape.transpose(r)?;
    tape.matmul(q, rt)
}

/// Mean cross-entropy of rows of `S/τ` against their diagonal targets.
pub fn info_nce_directional(tape: &mut Tape, s: Var, inv_tau: Var) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(BggError::dim("info_nce", format!("need square [B, B], got {shape:?}")));
    }
    let logits = tape.mul_scalar(s, inv_tau)?;
    let lp = tape.log_softmax(logits, 1)?;
    let d = tape.diag(lp)?;
    let m = tape.mean(d)?;
    tape.scale(m, -1.0)
}

/// `½(L(S) + L(Sᵀ))` for aligned pairs `(qᵢ, rᵢ)`.
pub fn symmetric_loss(tape: &mut Tape, q: Var, r: Var, inv_tau: Var) -> Result<Var> {
    let s = similarity_matrix(tape, q, r)?;
    let st = tape.transpose(s)?;
    let a = info_nce_directional(tape, s, inv_tau)?;
    let b = info_nce_directional(tape, st, inv_tau)?;
    let sum = tape.add(a, b)?;
    tape.scale(sum, 0.5)
}

/// Loss value and gradients with respect to `q`, `r` and the free
/// temperature scalar.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub dq: Vec<f64>,
    pub dr: Vec<f64>,
    pub dfree: f64,
}

/// Evaluates [`symmetric_loss`] on `[B, E]` matrices and backpropagates.
pub fn symmetric_loss_grads(q: &Tensor, r: &Tensor, temp: &TemperatureParam) -> Result<LossGrads> {
    let mut tape = Tape::new();
    let qv = tape.param(q);
    let rv = tape.param(r);
    let free = tape.param(&temp.free);
    let inv = TemperatureParam::inverse_on_tape(&mut tape, free)?;
    let loss = symmetric_loss(&mut tape, qv, rv, inv)?;
    tape.backward(loss)?;
    let grab = |v: Var| {
        tape.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    };
    Ok(LossGrads {
        loss: tape.value(loss)[0],
        dq: grab(qv),
        dr: grab(rv),
        dfree: grab(free)[0],
    })
}
