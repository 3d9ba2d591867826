use crate::error::{BggError, Result};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{Grads, Op, Tape, Var};

impl Tape {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// Either operand may be a plain matrix, in which case it is shared by
    /// every batch entry of the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || BggError::dim("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batch_dims, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(mismatch());
        };
        let batch: usize = batch_dims.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for t in 0..batch {
                let ao = if a_batched { t * m * k } else { 0 };
                let bo = if b_batched { t * k * n } else { 0 };
                gemm_nn(
                    &va[ao..ao + m * k],
                    &vb[bo..bo + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_dims;
        shape.extend([m, n]);
        self.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
        )
    }

    /// Affine map over the last axis: `x[.., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != inp {
            return Err(BggError::dim("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(BggError::dim(
                    "linear",
                    format!("bias {:?} for {out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / inp;
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let vb = self.value(b);
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(vb);
            }
        }
        gemm_nn(self.value(x), self.value(w), &mut y, rows, inp, out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        self.push(
            "linear",
            shape,
            y,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(BggError::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, v, Op::Scale(x, c))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(BggError::dim(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s)[0];
        let v = self.value(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", shape, v, Op::MulScalar { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(BggError::dim("diag", format!("need a square matrix, got {s:?}")));
        }
        let n = s[0];
        let v = (0..n).map(|i| self.value(x)[i * n + i]).collect();
        self.push("diag", vec![n], v, Op::Diag(x, n))
    }
}

type MatMulDims = (usize, bool, bool, usize, usize, usize);

pub(super) fn matmul_backward(
    va: &[f64],
    vb: &[f64],
    a: Var,
    b: Var,
    g: &[f64],
    grads: &mut Grads,
    (batch, a_batched, b_batched, m, k, n): MatMulDims,
) {
    if let Some(ga) = grads.slot(a) {
        for t in 0..batch {
            let ao = if a_batched { t * m * k } else { 0 };
            let bo = if b_batched { t * k * n } else { 0 };
            gemm_nt(
                &g[t * m * n..(t + 1) * m * n],
                &vb[bo..bo + k * n],
                &mut ga[ao..ao + m * k],
                m,
                n,
                k,
            );
        }
    }
    if let Some(gb) = grads.slot(b) {
        for t in 0..batch {
            let ao = if a_batched { t * m * k } else { 0 };
            let bo = if b_batched { t * k * n } else { 0 };
            gemm_tn(
                &va[ao..ao + m * k],
                &g[t * m * n..(t + 1) * m * n],
                &mut gb[bo..bo + k * n],
                m,
                k,
                n,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn linear_backward(
    vx: &[f64],
    vw: &[f64],
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[f64],
    grads: &mut Grads,
    rows: usize,
    inp: usize,
    out: usize,
) {
    if let Some(gx) = grads.slot(x) {
        gemm_nt(g, vw, gx, rows, out, inp);
    }
    if let Some(gw) = grads.slot(w) {
        gemm_tn(vx, g, gw, rows, inp, out);
    }
    if let Some(b) = b {
        if let Some(gb) = grads.slot(b) {
            for r in 0..rows {
                for (d, s) in gb.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                    *d += s;
                }
            }
        }
    }
}
