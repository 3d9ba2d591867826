use crate::error::{BggError, Result};

use super::tape::{AxisGeom, Grads, Op, Tape, Unary, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Silu => x * sigmoid(x),
        Unary::Tanh => x.tanh(),
        // tanh approximation of GELU
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
    }
}

fn unary_deriv(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
    }
}

impl Tape {
    fn unary(&mut self, name: &'static str, x: Var, kind: Unary) -> Result<Var> {
        let v = self.value(x).iter().map(|&x| unary_fwd(kind, x)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, v, Op::Unary(x, kind))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Unary::Exp)
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, Unary::Silu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Unary::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, Unary::Gelu)
    }

    fn axis(&self, op: &'static str, x: Var, axis: usize) -> Result<AxisGeom> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(BggError::dim(op, format!("axis {axis} out of range for {s:?}")));
        }
        Ok(AxisGeom::new(s, axis))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let geom = self.axis("softmax", x, axis)?;
        let mut y = self.value(x).to_vec();
        for_each_lane(geom, |idx| {
            let m = idx.clone().map(|i| y[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                y[i] = (y[i] - m).exp();
                z += y[i];
            }
            for i in idx {
                y[i] /= z;
            }
        });
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, y, Op::Softmax(x, geom))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let geom = self.axis("log_softmax", x, axis)?;
        let mut y = self.value(x).to_vec();
        for_each_lane(geom, |idx| {
            let m = idx.clone().map(|i| y[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.clone().map(|i| (y[i] - m).exp()).sum::<f64>().ln();
            for i in idx {
                y[i] -= lse;
            }
        });
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, y, Op::LogSoftmax(x, geom))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(BggError::dim(
                "layer_norm",
                format!(
                    "input {s:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(BggError::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * vg[j] + vb[j];
            }
        }
        self.push(
            "layer_norm",
            s,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Scales each row over the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let vx = self.value(x);
        let rows = vx.len() / d;
        let mut norms = vec![0.0; rows];
        let mut y = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = n;
            for j in 0..d {
                y[r * d + j] = row[j] / n;
            }
        }
        self.push("l2_normalize", s, y, Op::L2Normalize { x, norms })
    }
}

/// Calls `f` with the flat indices of every lane along the geometry's axis.
fn for_each_lane(geom: AxisGeom, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..geom.outer {
        for i in 0..geom.inner {
            let start = o * geom.len * geom.inner + i;
            let end = start + geom.len * geom.inner;
            f((start..end).step_by(geom.inner));
        }
    }
}

pub(super) fn unary_backward(kind: Unary, vx: &[f64], vy: &[f64], x: Var, g: &[f64], grads: &mut Grads) {
    if let Some(gx) = grads.slot(x) {
        for i in 0..g.len() {
            gx[i] += g[i] * unary_deriv(kind, vx[i], vy[i]);
        }
    }
}

pub(super) fn softmax_backward(y: &[f64], geom: AxisGeom, x: Var, g: &[f64], grads: &mut Grads) {
    if let Some(gx) = grads.slot(x) {
        for_each_lane(geom, |idx| {
            let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
            for i in idx {
                gx[i] += y[i] * (g[i] - dot);
            }
        });
    }
}

pub(super) fn log_softmax_backward(y: &[f64], geom: AxisGeom, x: Var, g: &[f64], grads: &mut Grads) {
    if let Some(gx) = grads.slot(x) {
        for_each_lane(geom, |idx| {
            let gs: f64 = idx.clone().map(|i| g[i]).sum();
            for i in idx {
                gx[i] += g[i] - y[i].exp() * gs;
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward(
    vgamma: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    x: Var,
    gamma: Var,
    beta: Var,
    g: &[f64],
    grads: &mut Grads,
) {
    let d = vgamma.len();
    let rows = rstd.len();
    if let Some(gx) = grads.slot(x) {
        let mut dh = vec![0.0; d];
        for r in 0..rows {
            let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                dh[j] = gr[j] * vgamma[j];
                m1 += dh[j];
                m2 += dh[j] * hr[j];
            }
            m1 /= d as f64;
            m2 /= d as f64;
            for j in 0..d {
                gx[r * d + j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
            }
        }
    }
    if let Some(gg) = grads.slot(gamma) {
        for r in 0..rows {
            for j in 0..d {
                gg[j] += g[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(gb) = grads.slot(beta) {
        for r in 0..rows {
            for j in 0..d {
                gb[j] += g[r * d + j];
            }
        }
    }
}

pub(super) fn l2_normalize_backward(y: &[f64], norms: &[f64], x: Var, g: &[f64], grads: &mut Grads) {
    if let Some(gx) = grads.slot(x) {
        let d = y.len() / norms.len();
        for (r, &n) in norms.iter().enumerate() {
            let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..d {
                gx[r * d + j] += (gr[j] - yr[j] * dot) / n;
            }
        }
    }
}
