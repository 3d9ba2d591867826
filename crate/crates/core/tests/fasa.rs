#![allow(clippy::needless_range_loop)]

mod common;

use bgg_core::autodiff::{grad_check_coords, sample_coords};
use bgg_core::backbone::LN_EPS;
use bgg_core::fasa::{
    attention_aggregate, fasa_forward, fasa_forward_with_weights, freq_modulate, gated_mix, FasaParams,
};
use bgg_core::{BggError, Tape, Tensor, Var};
use common::*;

const D: usize = 64;
const G: usize = 8;
const L: usize = G * G;

fn params(seed: u64) -> FasaParams {
    let mut r = rng(seed);
    let mut p = FasaParams::init(D, G, &mut r).unwrap();
    p.w_freq_re = Tensor::randn([G, G], 1.0, &mut r).trainable();
    p.w_freq_im = Tensor::randn([G, G], 1.0, &mut r).trainable();
    for name in [
        "b_up", "b_conv", "b_down", "b_mlp1", "b_mlp2", "b_pool1", "b_pool2", "ln1_b", "ln2_b",
    ] {
        let i = FasaParams::NAMES.iter().position(|n| *n == name).unwrap();
        let t = &mut p.tensors_mut()[i];
        let n = t.numel();
        **t = Tensor::randn([n], 0.1, &mut r).trainable();
    }
    p
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> bgg_core::Result<Var> {
    let n = tape.value(y).len();
    let w = Tensor::new(tape.shape(y).to_vec(), projection(n, seed))?;
    let w = tape.constant(&w);
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

fn run_freq(p: &FasaParams, x: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let v = p.bind(&mut t);
    let xv = t.constant(x);
    let y = freq_modulate(&mut t, xv, &v).unwrap();
    t.value(y).to_vec()
}

#[test]
fn identity_spectrum_doubles_the_tokens() {
    let p = FasaParams::init(D, G, &mut rng(1)).unwrap();
    let x = Tensor::randn([L, D], 1.0, &mut rng(2));
    let y = run_freq(&p, &x);
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert!(max_abs(&y, &want) < 1e-12);
}

#[test]
fn zero_spectrum_leaves_the_residual() {
    let mut p = FasaParams::init(D, G, &mut rng(1)).unwrap();
    p.w_freq_re = Tensor::zeros([G, G]);
    let x = Tensor::randn([L, D], 1.0, &mut rng(3));
    assert_eq!(run_freq(&p, &x), x.data());
}

#[test]
fn dc_only_spectrum_adds_channel_means() {
    let mut p = FasaParams::init(D, G, &mut rng(1)).unwrap();
    p.w_freq_re = Tensor::from_fn([G, G], |i| if i == 0 { 1.0 } else { 0.0 });
    let x = Tensor::randn([L, D], 1.0, &mut rng(4));
    let y = run_freq(&p, &x);
    for c in 0..D {
        let mean = (0..L).map(|l| x.get(&[l, c])).sum::<f64>() / L as f64;
        for l in 0..L {
            assert!((y[l * D + c] - (mean + x.get(&[l, c]))).abs() < 1e-12);
        }
    }
}

/// `Re(iDFT(DFT(x) ⊙ W))` per channel via the naive transform.
fn naive_modulate(x: &Tensor, wr: &[f64], wi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xt = transpose(x.data(), L, D);
    let mut re = vec![0.0; L * D];
    let mut im = vec![0.0; L * D];
    for c in 0..D {
        let (fr, fi) = naive_dft2(&xt[c * L..(c + 1) * L], G, G);
        let pr: Vec<f64> = (0..L).map(|k| fr[k] * wr[k] - fi[k] * wi[k]).collect();
        let pi: Vec<f64> = (0..L).map(|k| fr[k] * wi[k] + fi[k] * wr[k]).collect();
        let (br, bi) = naive_dft2_complex(&pr, &pi, G, G, 1.0);
        for l in 0..L {
            re[l * D + c] = br[l] / L as f64;
            im[l * D + c] = bi[l] / L as f64;
        }
    }
    (re, im)
}

#[test]
fn modulation_matches_naive_dft_composition() {
    let p = params(5);
    let x = Tensor::randn([L, D], 1.0, &mut rng(6));
    let y = run_freq(&p, &x);
    let (re, _) = naive_modulate(&x, p.w_freq_re.data(), p.w_freq_im.data());
    let want: Vec<f64> = re.iter().zip(x.data()).map(|(a, b)| a + b).collect();
    assert!(max_abs(&y, &want) < 1e-9);
}

#[test]
fn hermitian_spectrum_has_no_imaginary_leakage() {
    let mut r = rng(7);
    let a = Tensor::randn([G, G], 1.0, &mut r);
    let b = Tensor::randn([G, G], 1.0, &mut r);
    let mut wr = vec![0.0; L];
    let mut wi = vec![0.0; L];
    for u in 0..G {
        for v in 0..G {
            let (cu, cv) = ((G - u) % G, (G - v) % G);
            wr[u * G + v] = 0.5 * (a.get(&[u, v]) + a.get(&[cu, cv]));
            wi[u * G + v] = 0.5 * (b.get(&[u, v]) - b.get(&[cu, cv]));
        }
    }
    let x = Tensor::randn([L, D], 1.0, &mut rng(8));
    let (re, im) = naive_modulate(&x, &wr, &wi);
    assert!(im.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-9);
    let mut p = FasaParams::init(D, G, &mut rng(1)).unwrap();
    p.w_freq_re = Tensor::new([G, G], wr).unwrap();
    p.w_freq_im = Tensor::new([G, G], wi).unwrap();
    let y = run_freq(&p, &x);
    let want: Vec<f64> = re.iter().zip(x.data()).map(|(a, b)| a + b).collect();
    assert!(max_abs(&y, &want) < 1e-9);
}

#[test]
fn grid_mismatch_is_config_error() {
    let p = FasaParams::init(D, G, &mut rng(1)).unwrap();
    let mut t = Tape::new();
    let v = p.bind(&mut t);
    let x = t.constant(&Tensor::zeros([60, D]));
    assert!(matches!(freq_modulate(&mut t, x, &v), Err(BggError::Config(_))));
    assert!(matches!(FasaParams::init(D, 6, &mut rng(1)), Err(BggError::Config(_))));
}

/// Plain-loop gated mixer.
fn reference_mix(p: &FasaParams, x: &[f64]) -> Vec<f64> {
    let h = loop_layer_norm(x, D, p.ln1_g.data(), p.ln1_b.data(), LN_EPS);
    let h = loop_linear(&h, L, D, p.w_up.data(), p.b_up.data(), 2 * D);
    let mut content = vec![0.0; L * D];
    let mut gate = vec![0.0; L * D];
    for l in 0..L {
        content[l * D..(l + 1) * D].copy_from_slice(&h[l * 2 * D..l * 2 * D + D]);
        gate[l * D..(l + 1) * D].copy_from_slice(&h[l * 2 * D + D..(l + 1) * 2 * D]);
    }
    let ct = transpose(&content, L, D);
    let conv = loop_conv1d(&ct, D, L, p.k_conv.data(), 3, Some(p.b_conv.data()));
    let conv = transpose(&conv, D, L);
    let mixed: Vec<f64> = conv.iter().zip(&gate).map(|(c, g)| c * silu(*g)).collect();
    let mid: Vec<f64> = loop_linear(&mixed, L, D, p.w_down.data(), p.b_down.data(), D)
        .iter()
        .zip(x)
        .map(|(a, b)| a + b)
        .collect();
    let h = loop_layer_norm(&mid, D, p.ln2_g.data(), p.ln2_b.data(), LN_EPS);
    let h: Vec<f64> = loop_linear(&h, L, D, p.w_mlp1.data(), p.b_mlp1.data(), 4 * D)
        .into_iter()
        .map(gelu)
        .collect();
    loop_linear(&h, L, 4 * D, p.w_mlp2.data(), p.b_mlp2.data(), D)
        .iter()
        .zip(&mid)
        .map(|(a, b)| a + b)
        .collect()
}

fn run_mix(p: &FasaParams, x: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let v = p.bind(&mut t);
    let xv = t.constant(x);
    let y = gated_mix(&mut t, xv, &v).unwrap();
    t.value(y).to_vec()
}

#[test]
fn gated_mix_matches_loop_reference() {
    let p = params(9);
    let x = Tensor::randn([L, D], 1.0, &mut rng(10));
    assert!(max_abs(&run_mix(&p, &x), &reference_mix(&p, x.data())) < 1e-10);
}

#[test]
fn closed_gate_and_zero_mlp_reduce_to_identity() {
    let mut p = FasaParams::init(D, G, &mut rng(11)).unwrap();
    let x = Tensor::randn([L, D], 1.0, &mut rng(12));
    p.w_mlp2 = Tensor::zeros([4 * D, D]);
    let w = p.w_up.data_mut();
    for r in 0..D {
        for c in D..2 * D {
            w[r * 2 * D + c] = 0.0;
        }
    }
    assert_eq!(run_mix(&p, &x), x.data());
}

#[test]
fn gated_mix_gradients() {
    let p = params(13);
    let x = Tensor::randn([L, D], 1.0, &mut rng(14));
    let mut r = rng(15);
    let rep = grad_check_coords(
        |t, xv| {
            let v = p.bind_frozen(t);
            let y = gated_mix(t, xv, &v)?;
            project(t, y, 16)
        },
        &x,
        1e-5,
        &sample_coords(x.numel(), 40, &mut r),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

fn run_pool(p: &FasaParams, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let v = p.bind(&mut t);
    let xv = t.constant(x);
    let (vec, w) = attention_aggregate(&mut t, xv, &v).unwrap();
    (t.value(vec).to_vec(), t.value(w).to_vec())
}

#[test]
fn equal_logits_pool_to_the_mean() {
    let mut p = params(17);
    p.w_pool2 = Tensor::zeros([D / 2, 1]);
    let x = Tensor::randn([L, D], 1.0, &mut rng(18));
    let (vec, w) = run_pool(&p, &x);
    for c in 0..D {
        let mean = (0..L).map(|l| x.get(&[l, c])).sum::<f64>() / L as f64;
        assert!((vec[c] - mean).abs() < 1e-12);
    }
    assert!(w.iter().all(|&a| (a - 1.0 / L as f64).abs() < 1e-15));
}

#[test]
fn pooling_weights_are_a_distribution() {
    let p = params(19);
    for s in 0..4 {
        let x = Tensor::randn([L, D], 3.0, &mut rng(20 + s));
        let (_, w) = run_pool(&p, &x);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&a| a > 0.0));
    }
}

#[test]
fn two_token_hand_softmax() {
    // D = 2, hidden 1: logit_i = a·tanh(x_i0), with a·tanh(1) = ln 3.
    let mut p = FasaParams::init(2, 1, &mut rng(21)).unwrap();
    p.w_pool1 = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
    p.b_pool1 = Tensor::zeros([1]);
    p.w_pool2 = Tensor::new([1, 1], vec![3f64.ln() / 1f64.tanh()]).unwrap();
    p.b_pool2 = Tensor::zeros([1]);
    let x = Tensor::new([2, 2], vec![1.0, 5.0, 0.0, -3.0]).unwrap();
    let (vec, w) = run_pool(&p, &x);
    assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12, "{w:?}");
    assert!((vec[0] - 0.75).abs() < 1e-12);
    assert!((vec[1] - (0.75 * 5.0 - 0.25 * 3.0)).abs() < 1e-12);
}

#[test]
fn pooled_vector_lies_in_the_token_hull() {
    let p = params(22);
    let x = Tensor::randn([L, D], 2.0, &mut rng(23));
    let (vec, _) = run_pool(&p, &x);
    for c in 0..D {
        let col: Vec<f64> = (0..L).map(|l| x.get(&[l, c])).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo - 1e-12 <= vec[c] && vec[c] <= hi + 1e-12);
    }
}

#[test]
fn pooling_is_permutation_equivariant() {
    let p = params(24);
    let x = Tensor::randn([L, D], 1.0, &mut rng(25));
    let perm: Vec<usize> = (0..L).map(|i| (i * 5 + 3) % L).collect();
    let xp = Tensor::from_fn([L, D], |i| x.get(&[perm[i / D], i % D]));
    let (v0, w0) = run_pool(&p, &x);
    let (v1, w1) = run_pool(&p, &xp);
    assert!(max_abs(&v0, &v1) < 1e-12);
    for i in 0..L {
        assert!((w1[i] - w0[perm[i]]).abs() < 1e-15);
    }
}

#[test]
fn identical_tokens_pool_independently_of_pooling_weights() {
    let mut p = FasaParams::init(D, G, &mut rng(26)).unwrap();
    p.k_conv = Tensor::from_fn([D, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
    let tok = Tensor::randn([D], 1.0, &mut rng(27));
    let x = Tensor::from_fn([L, D], |i| tok.data()[i % D]);
    let run = |p: &FasaParams| {
        let mut t = Tape::new();
        let v = p.bind(&mut t);
        let xv = t.constant(&x);
        let y = fasa_forward(&mut t, xv, &v).unwrap();
        t.value(y).to_vec()
    };
    let a = run(&p);
    let mut q = p.clone();
    q.w_pool1 = Tensor::randn([D, D / 2], 2.0, &mut rng(28));
    q.w_pool2 = Tensor::randn([D / 2, 1], 2.0, &mut rng(29));
    assert!(max_abs(&a, &run(&q)) < 1e-12);
    assert_eq!(a.len(), D);
}

#[test]
fn end_to_end_gradients_for_every_tensor() {
    let p = params(30);
    let x = Tensor::randn([L, D], 1.0, &mut rng(31));
    let tensors = p.tensors();
    let mut r = rng(32);
    for (i, name) in FasaParams::NAMES.iter().enumerate() {
        let target = tensors[i];
        if *name == "b_pool2" {
            continue;
        }
        let coords = sample_coords(target.numel(), 8, &mut r);
        let rep = grad_check_coords(
            |t, w| {
                let v = p.bind_with(t, |t, j, x| if j == i { w } else { t.constant(x) });
                let xv = t.constant(&x);
                let y = fasa_forward(t, xv, &v)?;
                project(t, y, 33)
            },
            target,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{name}: {rep:?}");
    }
    // A uniform logit shift leaves the softmax unchanged.
    let mut t = Tape::new();
    let v = p.bind(&mut t);
    let xv = t.constant(&x);
    let y = fasa_forward(&mut t, xv, &v).unwrap();
    let s = project(&mut t, y, 33).unwrap();
    t.backward(s).unwrap();
    let i = FasaParams::NAMES.iter().position(|n| *n == "b_pool2").unwrap();
    assert!(t.grad(v.vars()[i]).unwrap()[0].abs() < 1e-12);

    let rep = grad_check_coords(
        |t, xv| {
            let v = p.bind_frozen(t);
            let (y, _) = fasa_forward_with_weights(t, xv, &v)?;
            project(t, y, 33)
        },
        &x,
        1e-5,
        &sample_coords(x.numel(), 30, &mut r),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "input: {rep:?}");
}
