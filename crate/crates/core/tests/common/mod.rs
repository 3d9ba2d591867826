//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code paths it is used to check.
#![allow(dead_code, clippy::too_many_arguments)]

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// O(N^2) 2-D DFT of a real `h x w` grid; returns (re, im).
pub fn naive_dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    naive_dft2_complex(x, &vec![0.0; x.len()], h, w, -1.0)
}

/// O(N^2) 2-D DFT with sign `s` in the exponent (no normalization).
pub fn naive_dft2_complex(re: &[f64], im: &[f64], h: usize, w: usize, s: f64) -> (Vec<f64>, Vec<f64>) {
    let mut or = vec![0.0; h * w];
    let mut oi = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = s * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (c, sn) = (ang.cos(), ang.sin());
                    let (xr, xi) = (re[y * w + x], im[y * w + x]);
                    ar += xr * c - xi * sn;
                    ai += xr * sn + xi * c;
                }
            }
            or[u * w + v] = ar;
            oi[u * w + v] = ai;
        }
    }
    (or, oi)
}

/// Straight nested-loop depthwise correlation with zero padding.
pub fn loop_depthwise(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    ks: usize,
    d: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let pad = (d * (ks - 1) / 2) as isize;
    let mut y = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias.map_or(0.0, |b| b[ch]);
                for u in 0..ks {
                    for v in 0..ks {
                        let si = i as isize + (u * d) as isize - pad;
                        let sj = j as isize + (v * d) as isize - pad;
                        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                            acc += k[ch * ks * ks + u * ks + v] * x[ch * h * w + si as usize * w + sj as usize];
                        }
                    }
                }
                y[ch * h * w + i * w + j] = acc;
            }
        }
    }
    y
}

pub fn loop_pointwise(x: &[f64], cin: usize, hw: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; cout * hw];
    for o in 0..cout {
        for p in 0..hw {
            let mut acc = b[o];
            for i in 0..cin {
                acc += wt[o * cin + i] * x[i * hw + p];
            }
            y[o * hw + p] = acc;
        }
    }
    y
}

pub fn loop_conv1d(x: &[f64], c: usize, l: usize, k: &[f64], ks: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let pad = (ks / 2) as isize;
    let mut y = vec![0.0; c * l];
    for ch in 0..c {
        for i in 0..l {
            let mut acc = bias.map_or(0.0, |b| b[ch]);
            for t in 0..ks {
                let s = i as isize + t as isize - pad;
                if s >= 0 && (s as usize) < l {
                    acc += k[ch * ks + t] * x[ch * l + s as usize];
                }
            }
            y[ch * l + i] = acc;
        }
    }
    y
}

pub fn loop_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-wise `x[rows, inp] · w[inp, out] + b`.
pub fn loop_linear(x: &[f64], rows: usize, inp: usize, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = b[o];
            for i in 0..inp {
                acc += x[r * inp + i] * w[i * out + o];
            }
            y[r * out + o] = acc;
        }
    }
    y
}

/// Row-wise layer norm with biased variance.
pub fn loop_layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        for j in 0..d {
            y[r * d + j] = (row[j] - mu) / (var + eps).sqrt() * g[j] + b[j];
        }
    }
    y
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            y[c * rows + r] = x[r * cols + c];
        }
    }
    y
}

/// Softmax of one slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Random projection used to pool a tensor to a scalar with O(1) gradients.
pub fn projection(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Unit-norm descriptor from raw values.
pub fn unit(v: Vec<f64>) -> bgg_core::Descriptor {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = v.len();
    bgg_core::Descriptor {
        vec: bgg_core::Tensor::new([d], v.into_iter().map(|x| x / n).collect()).unwrap(),
        l2_normalized: true,
    }
}

/// Exhaustive ranking: selection of the best remaining row each round;
/// equal scores go to the smaller id.
pub fn selection_rank(rows: &[bgg_core::Descriptor], ids: &[u32], q: &bgg_core::Descriptor) -> Vec<(u32, f64)> {
    let mut left: Vec<(u32, f64)> = rows
        .iter()
        .zip(ids)
        .map(|(r, &id)| (id, r.vec.data().iter().zip(q.vec.data()).map(|(a, b)| a * b).sum()))
        .collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (id, s) = left[i];
            let (bid, bs) = left[best];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// AP from prefix sums of the relevance flags.
pub fn prefix_sum_ap(flags: &[bool]) -> f64 {
    let prefix: Vec<usize> = flags
        .iter()
        .scan(0, |c, &f| {
            *c += f as usize;
            Some(*c)
        })
        .collect();
    let total = *prefix.last().unwrap();
    let precisions: f64 = (0..flags.len())
        .filter(|&i| flags[i])
        .map(|i| prefix[i] as f64 / (i + 1) as f64)
        .sum();
    precisions / total as f64
}

/// Parameters of one adapter with width `d` and bottleneck `dp`.
pub fn adapter_count(d: usize, dp: usize) -> usize {
    let h = dp / 2;
    let (mid, wide) = (3 * h / 8, 4 * h / 8);
    (d * dp + dp) + 2 * (h * dp + h) + (h * 9 + h) + (mid * 25 + mid) + (wide * 49 + wide) + (h * h + h) + (dp * d + d)
}

/// Backbone parameters from the raw configuration fields.
pub fn backbone_count(c: &bgg_core::BackboneConfig) -> usize {
    let (d, f) = (c.dim, c.dim * c.ffn_ratio);
    let patches = (c.image_size / c.patch_size).pow(2);
    let patch_len = 3 * c.patch_size * c.patch_size;
    let embed = patch_len * d + d + d + (patches + 1) * d + 2 * d;
    let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
    embed + c.depth * block
}

/// Aggregator parameters for width `d` on a `g × g` grid.
pub fn fasa_count(d: usize, g: usize) -> usize {
    2 * g * g
        + 2 * d
        + (d * 2 * d + 2 * d)
        + 4 * d
        + (d * d + d)
        + 2 * d
        + (d * 4 * d + 4 * d)
        + (4 * d * d + d)
        + (d * d / 2 + d / 2)
        + (d / 2 + 1)
}
