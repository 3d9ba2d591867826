//! Frozen toy vision transformer with per-block adapter hooks.
//!
//! Block layout is pre-norm:
//! `X' = X + MHA(LN X)`, then `X = X' + FFN(LN X') + λ·A(LN X')`
//! where `A` is an optional adapter. A final layer norm follows the last
//! block, after which the class token is split from the patch tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{BggError, Result};
use crate::mfea::BoundMfea;
use crate::params::{content_hash, param_set};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            ffn_ratio: 4,
            seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BggError::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.depth == 0 {
            return bad(format!("image_size, patch_size and depth must be positive: {self:?}"));
        }
        if self.dim == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return bad(format!("dim, heads and ffn_ratio must be positive: {self:?}"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        Ok(())
    }

    /// Side of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `L`.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

param_set! {
    /// Patch projection, class token, positional table and final norm.
    EmbedParams => EmbedVars {
        /// `[3·p², D]`
        w_patch,
        b_patch,
        /// `[1, D]`
        cls,
        /// `[L+1, D]`
        pos,
        lnf_g,
        lnf_b,
    }
}

param_set! {
    /// One transformer block. Q, K and V share a fused `[D, 3D]` projection.
    BlockParams => BlockVars {
        ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o,
        ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub embed: EmbedVars,
    pub blocks: Vec<BlockVars>,
}

impl BackboneParams {
    /// Seeded-random frozen weights.
    pub fn init(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let hidden = d * config.ffn_ratio;
        let pl = config.patch_len();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = EmbedParams {
            w_patch: Tensor::randn([pl, d], inv(pl), &mut rng),
            b_patch: Tensor::zeros([d]),
            cls: Tensor::randn([1, d], 0.5, &mut rng),
            pos: Tensor::randn([config.patches() + 1, d], 0.2, &mut rng),
            lnf_g: Tensor::full([d], 1.0),
            lnf_b: Tensor::zeros([d]),
        };
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_g: Tensor::full([d], 1.0),
                ln1_b: Tensor::zeros([d]),
                w_qkv: Tensor::randn([d, 3 * d], inv(d), &mut rng),
                b_qkv: Tensor::zeros([3 * d]),
                w_o: Tensor::randn([d, d], inv(d), &mut rng),
                b_o: Tensor::zeros([d]),
                ln2_g: Tensor::full([d], 1.0),
                ln2_b: Tensor::zeros([d]),
                w_ff1: Tensor::randn([d, hidden], inv(d), &mut rng),
                b_ff1: Tensor::zeros([hidden]),
                w_ff2: Tensor::randn([hidden, d], inv(hidden), &mut rng),
                b_ff2: Tensor::zeros([d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
        })
    }

    /// All tensors in serialization order: embedding set, then each block.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.embed.tensors();
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.embed.tensors_mut();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn count(&self) -> usize {
        crate::params::count(&self.tensors())
    }

    pub fn hash(&self) -> String {
        content_hash(&self.tensors())
    }

    /// Binds every weight as a constant.
    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            embed: self.embed.bind_frozen(tape),
            blocks: self.blocks.iter().map(|b| b.bind_frozen(tape)).collect(),
        }
    }
}

/// Cuts a `[3, H, W]` image into non-overlapping patches, one row per patch
/// in raster order, each row laid out channel-major then row-major.
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    if image.shape() != [3, s, s] {
        return Err(BggError::Config(format!(
            "image shape {:?} does not match configured [3, {s}, {s}]",
            image.shape()
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.patches() * cfg.patch_len());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..p {
                    let row = c * s * s + (gy * p + py) * s + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new([cfg.patches(), cfg.patch_len()], out)
}

/// Token sequence `X₀ = [cls; patches·W + b] + pos`, shape `[L+1, D]`.
pub fn patch_embed(tape: &mut Tape, image: &Tensor, cfg: &BackboneConfig, e: &EmbedVars) -> Result<Var> {
    let patches = patchify(image, cfg)?;
    let p = tape.constant(&patches);
    let tokens = tape.linear(p, e.w_patch, Some(e.b_patch))?;
    let seq = tape.concat(&[e.cls, tokens], 0)?;
    tape.add(seq, e.pos)
}

/// `x + MHA(LN x)` with per-head scaling `1/√(D/heads)`.
pub fn mha(tape: &mut Tape, x: Var, b: &BlockVars, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let dh = d / heads;
    let h = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
    let (attn, _) = attention(tape, h, b, n, d, heads, dh)?;
    tape.add(x, attn)
}

/// Multi-head attention on normalized input; returns the projected output
/// and the `[heads, N, N]` weights.
fn attention(
    tape: &mut Tape,
    h: Var,
    b: &BlockVars,
    n: usize,
    d: usize,
    heads: usize,
    dh: usize,
) -> Result<(Var, Var)> {
    let qkv = tape.linear(h, b.w_qkv, Some(b.b_qkv))?;
    let qkv = tape.reshape(qkv, [n, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[1, 2, 0, 3])?;
    let split = |tape: &mut Tape, i: usize| -> Result<Var> {
        let v = tape.narrow(qkv, 0, i, 1)?;
        tape.reshape(v, [heads, n, dh])
    };
    let q = split(tape, 0)?;
    let k = split(tape, 1)?;
    let v = split(tape, 2)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, [n, d])?;
    Ok((tape.linear(ctx, b.w_o, Some(b.b_o))?, weights))
}

/// Attention weights `[heads, N, N]` of one block, for inspection.
pub fn attention_weights(tape: &mut Tape, x: Var, b: &BlockVars, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let h = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
    Ok(attention(tape, h, b, n, d, heads, d / heads)?.1)
}

/// One adapted block. With `adapter` absent the adapter term is omitted.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    b: &BlockVars,
    heads: usize,
    adapter: Option<&BoundMfea>,
    lambda: f64,
) -> Result<Var> {
    let x1 = mha(tape, x, b, heads)?;
    let h = tape.layer_norm(x1, b.ln2_g, b.ln2_b, LN_EPS)?;
    let f = tape.linear(h, b.w_ff1, Some(b.b_ff1))?;
    let f = tape.gelu(f)?;
    let f = tape.linear(f, b.w_ff2, Some(b.b_ff2))?;
    let mut out = tape.add(x1, f)?;
    if let Some(a) = adapter {
        let y = a.forward(tape, h)?;
        if tape.shape(y) != tape.shape(x1) {
            return Err(BggError::dim(
                "block_forward",
                format!("adapter output {:?} vs tokens {:?}", tape.shape(y), tape.shape(x1)),
            ));
        }
        let y = tape.scale(y, lambda)?;
        out = tape.add(out, y)?;
    }
    Ok(out)
}

/// Runs all blocks and the final norm; returns `(cls [D], patches [L, D])`.
pub fn forward(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &BackboneConfig,
    bb: &BackboneVars,
    adapters: &[Option<BoundMfea>],
    lambda: f64,
) -> Result<(Var, Var)> {
    if adapters.len() != cfg.depth {
        return Err(BggError::Config(format!(
            "{} adapter slots for {} blocks",
            adapters.len(),
            cfg.depth
        )));
    }
    let mut x = patch_embed(tape, image, cfg, &bb.embed)?;
    for (b, a) in bb.blocks.iter().zip(adapters) {
        x = block_forward(tape, x, b, cfg.heads, a.as_ref(), lambda)?;
    }
    let x = tape.layer_norm(x, bb.embed.lnf_g, bb.embed.lnf_b, LN_EPS)?;
    let d = cfg.dim;
    let cls = tape.narrow(x, 0, 0, 1)?;
    let cls = tape.reshape(cls, [d])?;
    let patches = tape.narrow(x, 0, 1, cfg.patches())?;
    Ok((cls, patches))
}
