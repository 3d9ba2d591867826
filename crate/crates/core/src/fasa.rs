//! Frequency-aware structural aggregation of patch tokens.
//!
//! 1. `X_FM = Re(iFFT(FFT(X_p) ⊙ W)) + X_p`, with `W` complex `g×g` and shared
//!    across channels.
//! 2. Gated mixer: `[X_c, X_g] = up(LN x)`,
//!    `X_mid = down(conv1d(X_c) ⊙ SiLU(X_g)) + x`,
//!    `X_mix = MLP(LN X_mid) + X_mid`.
//! 3. Attention pooling: `w = softmax(v·tanh(U·X_mix))`, `vec = Σ wᵢ xᵢ`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::LN_EPS;
use crate::error::{BggError, Result};
use crate::fft::check_extent;
use crate::params::param_set;
use crate::tensor::Tensor;

pub const CONV1D_KERNEL: usize = 3;
pub const MLP_RATIO: usize = 4;

param_set! {
    /// Trainable aggregation weights.
    FasaParams => FasaVars {
        /// `[g, g]`, real part of `W_freq`
        w_freq_re,
        /// `[g, g]`, imaginary part of `W_freq`
        w_freq_im,
        ln1_g, ln1_b,
        /// `[D, 2D]`
        w_up, b_up,
        /// `[D, 3]` depthwise over the token axis
        k_conv, b_conv,
        /// `[D, D]`
        w_down, b_down,
        ln2_g, ln2_b,
        /// `[D, 4D]`
        w_mlp1, b_mlp1,
        /// `[4D, D]`
        w_mlp2, b_mlp2,
        /// `[D, D/2]`
        w_pool1, b_pool1,
        /// `[D/2, 1]`
        w_pool2, b_pool2,
    }
}

impl FasaParams {
    /// Identity spectrum `W = 1 + 0i`, unit norms, random affines.
    pub fn init<R: Rng + ?Sized>(dim: usize, grid: usize, rng: &mut R) -> Result<Self> {
        check_extent("grid", grid)?;
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(BggError::Config(format!(
                "aggregator width {dim} must be even and at least 2"
            )));
        }
        let (d, h) = (dim, dim / 2);
        let m = MLP_RATIO * d;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let p = Self {
            w_freq_re: Tensor::full([grid, grid], 1.0),
            w_freq_im: Tensor::zeros([grid, grid]),
            ln1_g: Tensor::full([d], 1.0),
            ln1_b: Tensor::zeros([d]),
            w_up: Tensor::randn([d, 2 * d], inv(d), rng),
            b_up: Tensor::zeros([2 * d]),
            k_conv: Tensor::randn([d, CONV1D_KERNEL], inv(CONV1D_KERNEL), rng),
            b_conv: Tensor::zeros([d]),
            w_down: Tensor::randn([d, d], inv(d), rng),
            b_down: Tensor::zeros([d]),
            ln2_g: Tensor::full([d], 1.0),
            ln2_b: Tensor::zeros([d]),
            w_mlp1: Tensor::randn([d, m], inv(d), rng),
            b_mlp1: Tensor::zeros([m]),
            w_mlp2: Tensor::randn([m, d], inv(m), rng),
            b_mlp2: Tensor::zeros([d]),
            w_pool1: Tensor::randn([d, h], inv(d), rng),
            b_pool1: Tensor::zeros([h]),
            w_pool2: Tensor::randn([h, 1], inv(h), rng),
            b_pool2: Tensor::zeros([1]),
        };
        Ok(p.into_trainable())
    }

    pub fn into_trainable(mut self) -> Self {
        for t in self.tensors_mut() {
            t.set_requires_grad(true);
        }
        self
    }

    pub fn grid(&self) -> usize {
        self.w_freq_re.shape()[0]
    }
}

/// `Re(iFFT(FFT(X_p) ⊙ W)) + X_p` on `[L, D]` patch tokens.
pub fn freq_modulate(tape: &mut Tape, patches: Var, p: &FasaVars) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    let g = tape.shape(p.w_freq_re)[0];
    if s.len() != 2 || s[0] != g * g {
        return Err(BggError::Config(format!(
            "patch tokens {s:?} do not fill a {g}x{g} frequency grid"
        )));
    }
    let map = tape.transpose(patches)?;
    let map = tape.reshape(map, [s[1], g, g])?;
    let m = tape.spectral_modulate(map, p.w_freq_re, p.w_freq_im)?;
    let m = tape.reshape(m, [s[1], s[0]])?;
    let m = tape.transpose(m)?;
    tape.add(m, patches)
}

/// Gated content/gate mixer followed by a residual MLP.
pub fn gated_mix(tape: &mut Tape, x: Var, p: &FasaVars) -> Result<Var> {
    let d = tape.shape(x)[1];
    let h = tape.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)?;
    let h = tape.linear(h, p.w_up, Some(p.b_up))?;
    let content = tape.narrow(h, 1, 0, d)?;
    let gate = tape.narrow(h, 1, d, d)?;
    let c = tape.transpose(content)?;
    let c = tape.conv1d(c, p.k_conv, Some(p.b_conv))?;
    let c = tape.transpose(c)?;
    let gate = tape.silu(gate)?;
    let mixed = tape.mul(c, gate)?;
    let mixed = tape.linear(mixed, p.w_down, Some(p.b_down))?;
    let mid = tape.add(mixed, x)?;
    let h = tape.layer_norm(mid, p.ln2_g, p.ln2_b, LN_EPS)?;
    let h = tape.linear(h, p.w_mlp1, Some(p.b_mlp1))?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, p.w_mlp2, Some(p.b_mlp2))?;
    tape.add(h, mid)
}

/// Softmax-weighted token pooling; returns `(vec [D], weights [L])`.
pub fn attention_aggregate(tape: &mut Tape, x: Var, p: &FasaVars) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let (l, d) = (s[0], s[1]);
    let h = tape.linear(x, p.w_pool1, Some(p.b_pool1))?;
    let h = tape.tanh(h)?;
    let logits = tape.linear(h, p.w_pool2, Some(p.b_pool2))?;
    let logits = tape.reshape(logits, [l])?;
    let weights = tape.softmax(logits, 0)?;
    let row = tape.reshape(weights, [1, l])?;
    let vec = tape.matmul(row, x)?;
    let vec = tape.reshape(vec, [d])?;
    Ok((vec, weights))
}

/// Full aggregation; returns `(vec [D], weights [L])`.
pub fn fasa_forward_with_weights(tape: &mut Tape, patches: Var, p: &FasaVars) -> Result<(Var, Var)> {
    let x = freq_modulate(tape, patches, p)?;
    let x = gated_mix(tape, x, p)?;
    attention_aggregate(tape, x, p)
}

/// Pooled `[D]` vector of `[L, D]` patch tokens.
pub fn fasa_forward(tape: &mut Tape, patches: Var, p: &FasaVars) -> Result<Var> {
    Ok(fasa_forward_with_weights(tape, patches, p)?.0)
}
