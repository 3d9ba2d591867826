//! Zero-padded ("same") convolutions on channel-first maps.

use crate::error::{BggError, Result};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{Grads, Op, Tape, Var};

impl Tape {
    /// Per-channel dilated correlation: `x[C,H,W]`, `kernel[C,k,k]`,
    /// optional `bias[C]`. Output keeps `H x W`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 3 || sk[0] != sx[0] || sk[1] != sk[2] {
            return Err(BggError::dim(
                "depthwise_conv2d",
                format!("input {sx:?}, kernel {sk:?}"),
            ));
        }
        let k = sk[1];
        if k.is_multiple_of(2) {
            return Err(BggError::Config(format!(
                "depthwise_conv2d kernel size {k} must be odd"
            )));
        }
        if dilation == 0 {
            return Err(BggError::Config("depthwise_conv2d dilation must be >= 1".into()));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let pad = dilation * (k - 1) / 2;
        let field = (k - 1) * dilation + 1;
        if field > h.min(w) + 2 * pad {
            return Err(BggError::Config(format!(
                "receptive field {field} exceeds padded extent {}",
                h.min(w) + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return Err(BggError::dim(
                    "depthwise_conv2d",
                    format!("bias {:?} for {c} channels", self.shape(b)),
                ));
            }
        }
        let (vx, vk) = (self.value(x), self.value(kernel));
        let mut y = vec![0.0; c * h * w];
        for ch in 0..c {
            let b = bias.map_or(0.0, |b| self.value(b)[ch]);
            let xs = &vx[ch * h * w..(ch + 1) * h * w];
            let ks = &vk[ch * k * k..(ch + 1) * k * k];
            let ys = &mut y[ch * h * w..(ch + 1) * h * w];
            ys.iter_mut().for_each(|v| *v = b);
            for u in 0..k {
                let dy = (u * dilation) as isize - pad as isize;
                for v in 0..k {
                    let dx = (v * dilation) as isize - pad as isize;
                    let kv = ks[u * k + v];
                    let (i0, i1) = valid_range(dy, h);
                    let (j0, j1) = valid_range(dx, w);
                    for i in i0..i1 {
                        let si = (i as isize + dy) as usize;
                        let (yrow, xrow) = (&mut ys[i * w..], &xs[si * w..]);
                        for j in j0..j1 {
                            yrow[j] += kv * xrow[(j as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        self.push(
            "depthwise_conv2d",
            sx,
            y,
            Op::DepthwiseConv2d {
                x,
                kernel,
                bias,
                dilation,
            },
        )
    }

    /// 1x1 convolution: `x[Cin,H,W]`, `w[Cout,Cin]`, `b[Cout]`.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] || self.shape(b) != [sw[0]] {
            return Err(BggError::dim(
                "pointwise_conv2d",
                format!("input {sx:?}, weight {sw:?}, bias {:?}", self.shape(b)),
            ));
        }
        let (cin, hw, cout) = (sx[0], sx[1] * sx[2], sw[0]);
        let mut y = vec![0.0; cout * hw];
        let vb = self.value(b);
        for o in 0..cout {
            y[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = vb[o]);
        }
        gemm_nn(self.value(w), self.value(x), &mut y, cout, cin, hw);
        self.push(
            "pointwise_conv2d",
            vec![cout, sx[1], sx[2]],
            y,
            Op::PointwiseConv2d { x, w, b },
        )
    }

    /// Per-channel 1-D correlation along the last axis: `x[C,L]`, `kernel[C,k]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 2 || sk.len() != 2 || sk[0] != sx[0] {
            return Err(BggError::dim("conv1d", format!("input {sx:?}, kernel {sk:?}")));
        }
        let k = sk[1];
        if k.is_multiple_of(2) {
            return Err(BggError::Config(format!("conv1d kernel size {k} must be odd")));
        }
        let (c, l) = (sx[0], sx[1]);
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return Err(BggError::dim(
                    "conv1d",
                    format!("bias {:?} for {c} channels", self.shape(b)),
                ));
            }
        }
        let pad = (k / 2) as isize;
        let (vx, vk) = (self.value(x), self.value(kernel));
        let mut y = vec![0.0; c * l];
        for ch in 0..c {
            let b = bias.map_or(0.0, |b| self.value(b)[ch]);
            for i in 0..l {
                let mut acc = b;
                for t in 0..k {
                    let s = i as isize + t as isize - pad;
                    if s >= 0 && (s as usize) < l {
                        acc += vk[ch * k + t] * vx[ch * l + s as usize];
                    }
                }
                y[ch * l + i] = acc;
            }
        }
        self.push("conv1d", sx, y, Op::Conv1d { x, kernel, bias })
    }
}

/// Output indices `i` in `[lo, hi)` for which `i + offset` lies in `[0, n)`.
fn valid_range(offset: isize, n: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn depthwise_backward(
    vx: &[f64],
    sx: &[usize],
    vk: &[f64],
    k: usize,
    dilation: usize,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    g: &[f64],
    grads: &mut Grads,
) {
    let (c, h, w) = (sx[0], sx[1], sx[2]);
    let pad = dilation * (k - 1) / 2;
    let want_x = grads.wants(x);
    let want_k = grads.wants(kernel);
    let mut gx = if want_x { vec![0.0; vx.len()] } else { Vec::new() };
    let mut gk = if want_k { vec![0.0; vk.len()] } else { Vec::new() };
    for ch in 0..c {
        let xs = &vx[ch * h * w..(ch + 1) * h * w];
        let gs = &g[ch * h * w..(ch + 1) * h * w];
        for u in 0..k {
            let dy = (u * dilation) as isize - pad as isize;
            for v in 0..k {
                let dx = (v * dilation) as isize - pad as isize;
                let kv = vk[ch * k * k + u * k + v];
                let (i0, i1) = valid_range(dy, h);
                let (j0, j1) = valid_range(dx, w);
                let mut kacc = 0.0;
                for i in i0..i1 {
                    let si = (i as isize + dy) as usize;
                    for j in j0..j1 {
                        let sj = (j as isize + dx) as usize;
                        let gv = gs[i * w + j];
                        if want_x {
                            gx[ch * h * w + si * w + sj] += kv * gv;
                        }
                        kacc += gv * xs[si * w + sj];
                    }
                }
                if want_k {
                    gk[ch * k * k + u * k + v] += kacc;
                }
            }
        }
    }
    if want_x {
        grads.add(x, &gx);
    }
    if want_k {
        grads.add(kernel, &gk);
    }
    if let Some(b) = bias {
        if let Some(gb) = grads.slot(b) {
            for ch in 0..c {
                gb[ch] += g[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>();
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn pointwise_backward(
    vx: &[f64],
    sx: &[usize],
    vw: &[f64],
    cout: usize,
    x: Var,
    w: Var,
    b: Var,
    g: &[f64],
    grads: &mut Grads,
) {
    let (cin, hw) = (sx[0], sx[1] * sx[2]);
    if let Some(gx) = grads.slot(x) {
        gemm_tn(vw, g, gx, cout, cin, hw);
    }
    if let Some(gw) = grads.slot(w) {
        gemm_nt(g, vx, gw, cout, hw, cin);
    }
    if let Some(gb) = grads.slot(b) {
        for o in 0..cout {
            gb[o] += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv1d_backward(
    vx: &[f64],
    sx: &[usize],
    vk: &[f64],
    k: usize,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    g: &[f64],
    grads: &mut Grads,
) {
    let (c, l) = (sx[0], sx[1]);
    let pad = (k / 2) as isize;
    if let Some(gx) = grads.slot(x) {
        for ch in 0..c {
            for i in 0..l {
                for t in 0..k {
                    let s = i as isize + t as isize - pad;
                    if s >= 0 && (s as usize) < l {
                        gx[ch * l + s as usize] += vk[ch * k + t] * g[ch * l + i];
                    }
                }
            }
        }
    }
    if let Some(gk) = grads.slot(kernel) {
        for ch in 0..c {
            for i in 0..l {
                for t in 0..k {
                    let s = i as isize + t as isize - pad;
                    if s >= 0 && (s as usize) < l {
                        gk[ch * k + t] += vx[ch * l + s as usize] * g[ch * l + i];
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        if let Some(gb) = grads.slot(b) {
            for ch in 0..c {
                gb[ch] += g[ch * l..(ch + 1) * l].iter().sum::<f64>();
            }
        }
    }
}
