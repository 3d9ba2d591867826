//! Multi-granularity feature enhancement adapter.
//!
//! Tokens `[L+1, D]` are projected to `D'`. The class token skips the
//! convolutional core. Patch tokens become a `[D', g, g]` map that feeds two
//! branches of `D'/2` channels each:
//!
//! * local: `SiLU(1×1 conv)`
//! * multi-grain: `1×1 conv`, 3×3 depthwise, channel split `1:3:4` into an
//!   identity group and depthwise groups at (5×5, d=2) and (7×7, d=3),
//!   concatenation, then `SiLU(1×1 fuse)`.
//!
//! The branch outputs are concatenated, added back onto the map, flattened,
//! and projected up to `D` together with the class token.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{BggError, Result};
use crate::params::param_set;
use crate::tensor::Tensor;

/// `(kernel, dilation)` of the shared depthwise stage and the two dilated groups.
pub const BASE_KERNEL: (usize, usize) = (3, 1);
pub const MID_KERNEL: (usize, usize) = (5, 2);
pub const WIDE_KERNEL: (usize, usize) = (7, 3);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MfeaConfig {
    /// Backbone width `D`.
    pub dim: usize,
    /// Bottleneck width `D'`.
    pub bottleneck: usize,
    /// Patch grid side `g`.
    pub grid: usize,
}

impl MfeaConfig {
    /// Bottleneck defaults to `D/4`.
    pub fn for_backbone(dim: usize, grid: usize) -> Self {
        Self {
            dim,
            bottleneck: dim / 4,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.grid == 0 {
            return Err(BggError::Config(format!("empty adapter config {self:?}")));
        }
        split_sizes(self.bottleneck).map(|_| ())
    }

    pub fn half(&self) -> usize {
        self.bottleneck / 2
    }
}

/// Group sizes of the `1:3:4` split over `D'/2` channels.
pub fn split_sizes(bottleneck: usize) -> Result<[usize; 3]> {
    let half = bottleneck / 2;
    if bottleneck == 0 || !bottleneck.is_multiple_of(2) || !half.is_multiple_of(8) {
        return Err(BggError::Config(format!(
            "bottleneck width {bottleneck} must be even with D'/2 divisible by 8 for the 1:3:4 split"
        )));
    }
    let unit = half / 8;
    Ok([unit, 3 * unit, 4 * unit])
}

param_set! {
    /// Trainable adapter weights for one block.
    MfeaParams => MfeaVars {
        /// `[D, D']`
        w_down, b_down,
        /// `[D'/2, D']`
        w_b1, b_b1,
        /// `[D'/2, D']`
        w_b2, b_b2,
        /// `[D'/2, 3, 3]`
        k_base, b_base,
        /// `[3·D'/16, 5, 5]`
        k_mid, b_mid,
        /// `[4·D'/16, 7, 7]`
        k_wide, b_wide,
        /// `[D'/2, D'/2]`
        w_fuse, b_fuse,
        /// `[D', D]`, zero at construction
        w_up, b_up,
    }
}

impl MfeaParams {
    /// Random down-projection and convolutions, zero up-projection.
    pub fn init<R: Rng + ?Sized>(cfg: &MfeaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, dp, h) = (cfg.dim, cfg.bottleneck, cfg.half());
        let [_, n_mid, n_wide] = split_sizes(dp)?;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let p = Self {
            w_down: Tensor::randn([d, dp], inv(d), rng),
            b_down: Tensor::zeros([dp]),
            w_b1: Tensor::randn([h, dp], inv(dp), rng),
            b_b1: Tensor::zeros([h]),
            w_b2: Tensor::randn([h, dp], inv(dp), rng),
            b_b2: Tensor::zeros([h]),
            k_base: Tensor::randn([h, 3, 3], 1.0 / 3.0, rng),
            b_base: Tensor::zeros([h]),
            k_mid: Tensor::randn([n_mid, 5, 5], 1.0 / 5.0, rng),
            b_mid: Tensor::zeros([n_mid]),
            k_wide: Tensor::randn([n_wide, 7, 7], 1.0 / 7.0, rng),
            b_wide: Tensor::zeros([n_wide]),
            w_fuse: Tensor::randn([h, h], inv(h), rng),
            b_fuse: Tensor::zeros([h]),
            w_up: Tensor::zeros([dp, d]),
            b_up: Tensor::zeros([d]),
        };
        Ok(p.into_trainable())
    }

    pub fn into_trainable(mut self) -> Self {
        for t in self.tensors_mut() {
            t.set_requires_grad(true);
        }
        self
    }
}

/// Adapter weights bound to a tape together with their geometry.
#[derive(Clone, Debug)]
pub struct BoundMfea {
    pub vars: MfeaVars,
    pub cfg: MfeaConfig,
}

impl BoundMfea {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        mfea_forward(tape, x, &self.vars, &self.cfg)
    }
}

/// Tokenwise affine `D → D'`, class token included.
pub fn down_project(tape: &mut Tape, x: Var, p: &MfeaVars) -> Result<Var> {
    tape.linear(x, p.w_down, Some(p.b_down))
}

/// `[L, C]` tokens in raster order to a `[C, g, g]` map.
pub fn tokens_to_map(tape: &mut Tape, tokens: Var) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 {
        return Err(BggError::dim("tokens_to_map", format!("expected [L, C], got {s:?}")));
    }
    let g = square_side(s[0])?;
    let t = tape.transpose(tokens)?;
    tape.reshape(t, [s[1], g, g])
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens(tape: &mut Tape, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 3 {
        return Err(BggError::dim("map_to_tokens", format!("expected [C, g, g], got {s:?}")));
    }
    let flat = tape.reshape(map, [s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

fn square_side(l: usize) -> Result<usize> {
    let g = (l as f64).sqrt().round() as usize;
    if g * g != l {
        return Err(BggError::Config(format!("{l} tokens do not form a square grid")));
    }
    Ok(g)
}

/// `SiLU(1×1 conv(xm))`, `D' → D'/2` channels.
pub fn branch_local(tape: &mut Tape, xm: Var, p: &MfeaVars) -> Result<Var> {
    let y = tape.pointwise_conv2d(xm, p.w_b1, p.b_b1)?;
    tape.silu(y)
}

/// Entry conv, shared 3×3 depthwise, `1:3:4` grouped dilated depthwise
/// stage, and `SiLU(1×1 fuse)`.
pub fn branch_multigrain(tape: &mut Tape, xm: Var, p: &MfeaVars) -> Result<Var> {
    let channels = tape.shape(xm)[0];
    let [n1, n2, n3] = split_sizes(channels)?;
    let y = tape.pointwise_conv2d(xm, p.w_b2, p.b_b2)?;
    let y = tape.depthwise_conv2d(y, p.k_base, Some(p.b_base), BASE_KERNEL.1)?;
    let v1 = tape.narrow(y, 0, 0, n1)?;
    let v2 = tape.narrow(y, 0, n1, n2)?;
    let v3 = tape.narrow(y, 0, n1 + n2, n3)?;
    let y2 = tape.depthwise_conv2d(v2, p.k_mid, Some(p.b_mid), MID_KERNEL.1)?;
    let y3 = tape.depthwise_conv2d(v3, p.k_wide, Some(p.b_wide), WIDE_KERNEL.1)?;
    let cat = tape.concat(&[v1, y2, y3], 0)?;
    let fused = tape.pointwise_conv2d(cat, p.w_fuse, p.b_fuse)?;
    tape.silu(fused)
}

/// Residual fusion `xm + [b1; b2]`, flatten, and shared up-projection of
/// `[cls_low; tokens]` to `[L+1, D]`.
pub fn fuse_and_up(tape: &mut Tape, xm: Var, b1: Var, b2: Var, cls_low: Var, p: &MfeaVars) -> Result<Var> {
    let branches = tape.concat(&[b1, b2], 0)?;
    let fused = tape.add(xm, branches)?;
    let tokens = map_to_tokens(tape, fused)?;
    let width = tape.shape(tokens)[1];
    let cls = tape.reshape(cls_low, [1, width])?;
    let seq = tape.concat(&[cls, tokens], 0)?;
    tape.linear(seq, p.w_up, Some(p.b_up))
}

/// Full adapter on a normalized `[L+1, D]` sequence.
pub fn mfea_forward(tape: &mut Tape, x: Var, p: &MfeaVars, cfg: &MfeaConfig) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let l = cfg.grid * cfg.grid;
    if s != [l + 1, cfg.dim] {
        return Err(BggError::dim(
            "mfea_forward",
            format!("input {s:?} for grid {} and width {}", cfg.grid, cfg.dim),
        ));
    }
    let low = down_project(tape, x, p)?;
    let cls_low = tape.narrow(low, 0, 0, 1)?;
    let patches = tape.narrow(low, 0, 1, l)?;
    let xm = tokens_to_map(tape, patches)?;
    let b1 = branch_local(tape, xm, p)?;
    let b2 = branch_multigrain(tape, xm, p)?;
    fuse_and_up(tape, xm, b1, b2, cls_low, p)
}
