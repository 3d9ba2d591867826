//! Frequency-domain modulation of channel-first grids.

use crate::error::{BggError, Result};
use crate::fft::{check_extent, transform_planes, Direction};

use super::tape::{Grads, Op, Tape, Var};

impl Tape {
    /// `Re(ifft2d(fft2d(x[c]) * w))` for every channel `c` of `x[C,H,W]`,
    /// with the complex weight `w = w_re + i*w_im` of shape `[H,W]` shared
    /// across channels.
    pub fn spectral_modulate(&mut self, x: Var, w_re: Var, w_im: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(w_re) != &sx[1..] || self.shape(w_im) != &sx[1..] {
            return Err(BggError::dim(
                "spectral_modulate",
                format!("input {sx:?}, weight {:?}/{:?}", self.shape(w_re), self.shape(w_im)),
            ));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        check_extent("H", h)?;
        check_extent("W", w)?;
        let mut re = self.value(x).to_vec();
        let mut im = vec![0.0; re.len()];
        transform_planes(&mut re, &mut im, c, h, w, Direction::Forward);
        complex_scale(&mut re, &mut im, self.value(w_re), self.value(w_im));
        transform_planes(&mut re, &mut im, c, h, w, Direction::Inverse);
        self.push("spectral_modulate", sx, re, Op::SpectralModulate { x, w_re, w_im })
    }
}

/// Multiplies every `H*W` plane of `(re, im)` by the complex weight.
fn complex_scale(re: &mut [f64], im: &mut [f64], wr: &[f64], wi: &[f64]) {
    let n = wr.len();
    for (pr, pi) in re.chunks_mut(n).zip(im.chunks_mut(n)) {
        for k in 0..n {
            let (a, b) = (pr[k], pi[k]);
            pr[k] = a * wr[k] - b * wi[k];
            pi[k] = a * wi[k] + b * wr[k];
        }
    }
}

// With G = ifft2d(dy) and X = fft2d(x):
//   dx      = Re(fft2d(W * G))
//   dW_re   =  sum_c Re(X_c * G_c)
//   dW_im   = -sum_c Im(X_c * G_c)
#[allow(clippy::too_many_arguments)]
pub(super) fn modulate_backward(
    vx: &[f64],
    sx: &[usize],
    wr: &[f64],
    wi: &[f64],
    x: Var,
    w_re: Var,
    w_im: Var,
    g: &[f64],
    grads: &mut Grads,
) {
    let (c, h, w) = (sx[0], sx[1], sx[2]);
    let n = h * w;
    let mut gre = g.to_vec();
    let mut gim = vec![0.0; g.len()];
    transform_planes(&mut gre, &mut gim, c, h, w, Direction::Inverse);

    if grads.wants(w_re) || grads.wants(w_im) {
        let mut xre = vx.to_vec();
        let mut xim = vec![0.0; vx.len()];
        transform_planes(&mut xre, &mut xim, c, h, w, Direction::Forward);
        let mut dre = vec![0.0; n];
        let mut dim = vec![0.0; n];
        for ch in 0..c {
            for k in 0..n {
                let i = ch * n + k;
                dre[k] += xre[i] * gre[i] - xim[i] * gim[i];
                dim[k] -= xre[i] * gim[i] + xim[i] * gre[i];
            }
        }
        grads.add(w_re, &dre);
        grads.add(w_im, &dim);
    }
    if grads.wants(x) {
        complex_scale(&mut gre, &mut gim, wr, wi);
        transform_planes(&mut gre, &mut gim, c, h, w, Direction::Forward);
        grads.add(x, &gre);
    }
}
