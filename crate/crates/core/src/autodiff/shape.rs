use crate::error::{BggError, Result};
use crate::tensor::numel;

use super::tape::{AxisGeom, Grads, Op, Tape, Var};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with shape `in_shape`) into the permuted layout, calling
/// `f(out_index, in_index)` for every element.
fn permute_indices(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(in_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(BggError::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        self.push("reshape", shape, v, Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(BggError::dim("permute", format!("perm {perm:?} for shape {s:?}")));
        }
        let vx = self.value(x);
        let mut out = vec![0.0; vx.len()];
        permute_indices(&s, perm, |o, i| out[o] = vx[i]);
        let out_shape = perm.iter().map(|&p| s[p]).collect();
        self.push("permute", out_shape, out, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(BggError::dim("transpose", format!("{:?}", self.shape(x))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(BggError::dim(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let geom = AxisGeom::new(&s, axis);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(geom.outer * len * geom.inner);
        for o in 0..geom.outer {
            let base = (o * geom.len + start) * geom.inner;
            out.extend_from_slice(&vx[base..base + len * geom.inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("narrow", shape, out, Op::Narrow { x, geom, start, len })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| BggError::dim("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(BggError::dim("concat", format!("axis {axis} for {s0:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(BggError::dim("concat", format!("{s:?} vs {s0:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
        )
    }
}

pub(super) fn permute_backward(in_shape: &[usize], perm: &[usize], x: Var, g: &[f64], grads: &mut Grads) {
    if let Some(gx) = grads.slot(x) {
        permute_indices(in_shape, perm, |o, i| gx[i] += g[o]);
    }
}

pub(super) fn narrow_backward(geom: AxisGeom, start: usize, len: usize, x: Var, g: &[f64], grads: &mut Grads) {
    if let Some(gx) = grads.slot(x) {
        let chunk = len * geom.inner;
        for o in 0..geom.outer {
            let base = (o * geom.len + start) * geom.inner;
            for (d, s) in gx[base..base + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                *d += s;
            }
        }
    }
}

pub(super) fn concat_backward(parts: &[Var], outer: usize, inner: usize, lens: &[usize], g: &[f64], grads: &mut Grads) {
    let total: usize = lens.iter().sum();
    let mut offset = 0;
    for (&p, &l) in parts.iter().zip(lens) {
        if let Some(gp) = grads.slot(p) {
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                for (d, s) in gp[o * l * inner..(o + 1) * l * inner]
                    .iter_mut()
                    .zip(&g[src..src + l * inner])
                {
                    *d += s;
                }
            }
        }
        offset += l;
    }
}
