//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{BggError, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares the tape gradient of the scalar `f(x)` against central
/// differences at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &all)
}

/// Like [`grad_check`] but only perturbs the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(BggError::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out)[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err || (i == coords[0] && report.max_rel_err == 0.0) {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Up to `max` distinct coordinates out of `n`, sorted.
pub fn sample_coords<R: Rng + ?Sized>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut v = sample(rng, n, max).into_vec();
    v.sort_unstable();
    v
}
