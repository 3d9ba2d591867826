//! Finite-difference gradient suite over the trainable modules at toy shapes
//! (`D = 64`, `L = 64`, `B = 4`).
//!
//! The composition check takes its analytic gradients from the trainer's
//! per-image fan-out ([`batch_gradients`]) and its numeric gradients from
//! gradient-free inference passes.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_coords, sample_coords, Tape, Var};
use crate::error::Result;
use crate::fasa::{fasa_forward, FasaParams};
use crate::loss::{symmetric_loss, symmetric_loss_grads, TemperatureParam};
use crate::mfea::{mfea_forward, MfeaConfig, MfeaParams, BASE_KERNEL, MID_KERNEL, WIDE_KERNEL};
use crate::model::{BggModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::batch_gradients;

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;
/// Absolute bound for tensors whose gradient is identically zero.
pub const ZERO_TOL: f64 = 1e-8;

const DIM: usize = 64;
const GRID: usize = 8;
const BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// `|a - n| / max(|a|, |n|, 1e-8)`, bounded by [`GRAD_TOL`].
    Relative,
    /// `|a - n|`, bounded by [`ZERO_TOL`].
    Absolute,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub module: &'static str,
    pub tensor: String,
    pub coords: usize,
    pub error: f64,
    pub metric: Metric,
}

impl GradRow {
    pub fn passes(&self) -> bool {
        match self.metric {
            Metric::Relative => self.error < GRAD_TOL,
            Metric::Absolute => self.error < ZERO_TOL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSuite {
    pub rows: Vec<GradRow>,
}

impl GradSuite {
    pub fn passes(&self) -> bool {
        self.rows.iter().all(GradRow::passes)
    }

    /// Worst relative error per module, in first-seen order.
    pub fn by_module(&self) -> Vec<(&'static str, f64, bool)> {
        let mut out: Vec<(&'static str, f64, bool)> = Vec::new();
        for r in &self.rows {
            let rel = if r.metric == Metric::Relative { r.error } else { 0.0 };
            match out.iter_mut().find(|e| e.0 == r.module) {
                Some(e) => {
                    e.1 = e.1.max(rel);
                    e.2 &= r.passes();
                }
                None => out.push((r.module, rel, r.passes())),
            }
        }
        out
    }

    /// Module-wise summary table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>14}  status\n", "module", "coords", "max_rel_err");
        for (m, err, ok) in self.by_module() {
            let coords: usize = self.rows.iter().filter(|r| r.module == m).map(|r| r.coords).sum();
            let _ = writeln!(
                s,
                "{m:<12} {coords:>8} {err:>14.3e}  {}",
                if ok { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

/// Whether tap `idx` of a `[C, k, k]` depthwise kernel with dilation `d`
/// reaches any pixel of a `grid × grid` map.
fn tap_is_live(idx: usize, k: usize, d: usize, grid: usize) -> bool {
    let c = k / 2;
    let (i, j) = ((idx % (k * k)) / k, idx % k);
    i.abs_diff(c) * d < grid && j.abs_diff(c) * d < grid
}

/// Up to `max` coordinates of `name`, skipping kernel taps that never touch
/// the map.
fn live_coords(name: &str, t: &Tensor, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let kernel = [("k_base", BASE_KERNEL), ("k_mid", MID_KERNEL), ("k_wide", WIDE_KERNEL)]
        .into_iter()
        .find(|(n, _)| name.ends_with(n))
        .map(|(_, k)| k);
    match kernel {
        Some((k, d)) => {
            let live: Vec<usize> = (0..t.numel()).filter(|&i| tap_is_live(i, k, d, GRID)).collect();
            sample_coords(live.len(), max, rng)
                .into_iter()
                .map(|i| live[i])
                .collect()
        }
        None => sample_coords(t.numel(), max, rng),
    }
}

/// `Σ y ⊙ P` for a fixed random `P`.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let p = Tensor::uniform(tape.shape(y).to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(rng_seed));
    let p = tape.constant(&p);
    let m = tape.mul(y, p)?;
    tape.sum(m)
}

fn randomize(t: &mut Tensor, std: f64, rng: &mut ChaCha8Rng) {
    *t = Tensor::randn(t.shape().to_vec(), std, rng).trainable();
}

fn relative_row(module: &'static str, tensor: &str, coords: usize, err: f64) -> GradRow {
    GradRow {
        module,
        tensor: tensor.to_string(),
        coords,
        error: err,
        metric: Metric::Relative,
    }
}

fn mfea_rows(rng: &mut ChaCha8Rng, per_tensor: usize) -> Result<Vec<GradRow>> {
    let cfg = MfeaConfig::for_backbone(DIM, GRID);
    let mut p = MfeaParams::init(&cfg, rng)?;
    randomize(&mut p.w_up, 0.2, rng);
    for b in [&mut p.b_down, &mut p.b_b1, &mut p.b_b2, &mut p.b_base, &mut p.b_fuse] {
        randomize(b, 0.1, rng);
    }
    let x = Tensor::randn([GRID * GRID + 1, DIM], 1.0, rng);
    let mut rows = Vec::new();
    let tensors = p.tensors();
    for (i, name) in MfeaParams::NAMES.iter().enumerate() {
        let coords = live_coords(name, tensors[i], per_tensor, rng);
        let rep = grad_check_coords(
            |t, w| {
                let v = p.bind_with(t, |t, j, x| if j == i { w } else { t.constant(x) });
                let xv = t.constant(&x);
                let y = mfea_forward(t, xv, &v, &cfg)?;
                project(t, y, 1)
            },
            tensors[i],
            FD_EPS,
            &coords,
        )?;
        rows.push(relative_row("mfea", name, coords.len(), rep.max_rel_err));
    }
    let coords = sample_coords(x.numel(), per_tensor, rng);
    let rep = grad_check_coords(
        |t, xv| {
            let v = p.bind_frozen(t);
            let y = mfea_forward(t, xv, &v, &cfg)?;
            project(t, y, 1)
        },
        &x,
        FD_EPS,
        &coords,
    )?;
    rows.push(relative_row("mfea", "input", coords.len(), rep.max_rel_err));
    Ok(rows)
}

fn fasa_rows(rng: &mut ChaCha8Rng, per_tensor: usize) -> Result<Vec<GradRow>> {
    let mut p = FasaParams::init(DIM, GRID, rng)?;
    randomize(&mut p.w_freq_re, 1.0, rng);
    randomize(&mut p.w_freq_im, 1.0, rng);
    for b in [&mut p.b_up, &mut p.b_conv, &mut p.b_mlp1, &mut p.b_pool1, &mut p.ln1_b] {
        randomize(b, 0.1, rng);
    }
    let x = Tensor::randn([GRID * GRID, DIM], 1.0, rng);
    let objective = |t: &mut Tape, v: &crate::fasa::FasaVars, xv: Var| -> Result<Var> {
        let y = fasa_forward(t, xv, v)?;
        project(t, y, 2)
    };
    let mut rows = Vec::new();
    let tensors = p.tensors();
    for (i, name) in FasaParams::NAMES.iter().enumerate() {
        let coords = sample_coords(tensors[i].numel(), per_tensor, rng);
        let rep = grad_check_coords(
            |t, w| {
                let v = p.bind_with(t, |t, j, x| if j == i { w } else { t.constant(x) });
                let xv = t.constant(&x);
                objective(t, &v, xv)
            },
            tensors[i],
            FD_EPS,
            &coords,
        )?;
        // A uniform shift of every pooling logit leaves the softmax unchanged.
        let row = if *name == "b_pool2" {
            GradRow {
                module: "fasa",
                tensor: name.to_string(),
                coords: coords.len(),
                error: (rep.analytic - rep.numeric).abs().max(rep.analytic.abs()),
                metric: Metric::Absolute,
            }
        } else {
            relative_row("fasa", name, coords.len(), rep.max_rel_err)
        };
        rows.push(row);
    }
    let coords = sample_coords(x.numel(), per_tensor, rng);
    let rep = grad_check_coords(
        |t, xv| {
            let v = p.bind_frozen(t);
            objective(t, &v, xv)
        },
        &x,
        FD_EPS,
        &coords,
    )?;
    rows.push(relative_row("fasa", "input", coords.len(), rep.max_rel_err));
    Ok(rows)
}

fn info_nce_rows(rng: &mut ChaCha8Rng) -> Result<Vec<GradRow>> {
    let e = 2 * DIM;
    let q = Tensor::randn([BATCH, e], 0.2, rng);
    let r = Tensor::randn([BATCH, e], 0.2, rng);
    let temp = TemperatureParam::from_free(0.3)?;
    let all = |t: &Tensor| (0..t.numel()).collect::<Vec<_>>();
    let loss = |t: &mut Tape, q: Var, r: Var, free: Var| -> Result<Var> {
        let inv = TemperatureParam::inverse_on_tape(t, free)?;
        symmetric_loss(t, q, r, inv)
    };
    let rq = grad_check_coords(
        |t, qv| {
            let (rv, f) = (t.constant(&r), t.constant(&temp.free));
            loss(t, qv, rv, f)
        },
        &q,
        FD_EPS,
        &all(&q),
    )?;
    let rr = grad_check_coords(
        |t, rv| {
            let (qv, f) = (t.constant(&q), t.constant(&temp.free));
            loss(t, qv, rv, f)
        },
        &r,
        FD_EPS,
        &all(&r),
    )?;
    let rt = grad_check_coords(
        |t, f| {
            let (qv, rv) = (t.constant(&q), t.constant(&r));
            loss(t, qv, rv, f)
        },
        &temp.free,
        FD_EPS,
        &[0],
    )?;
    Ok(vec![
        relative_row("info_nce", "q", q.numel(), rq.max_rel_err),
        relative_row("info_nce", "r", r.numel(), rr.max_rel_err),
        relative_row("info_nce", "tau.free", 1, rt.max_rel_err),
    ])
}

/// Loss of the batch from inference passes only.
fn inference_loss(model: &BggModel, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    let images: Vec<Tensor> = pairs
        .iter()
        .map(|p| p.0.clone())
        .chain(pairs.iter().map(|p| p.1.clone()))
        .collect();
    let descs = model.describe_batch(&images)?;
    let dim = model.config.descriptor_dim();
    let b = pairs.len();
    let stack = |d: &[crate::model::Descriptor]| -> Result<Tensor> {
        Tensor::new([b, dim], d.iter().flat_map(|x| x.vec.data().to_vec()).collect())
    };
    let q = stack(&descs[..b])?;
    let r = stack(&descs[b..])?;
    Ok(symmetric_loss_grads(&q, &r, &model.trainable.temperature)?.loss)
}

fn composition_rows(rng: &mut ChaCha8Rng, per_tensor: usize) -> Result<Vec<GradRow>> {
    let cfg = ModelConfig::default();
    let mut model = BggModel::new(&cfg, 11)?;
    for a in model.trainable.adapters.iter_mut().flatten() {
        randomize(&mut a.w_up, 0.2, rng);
    }
    let side = cfg.backbone.image_size;
    let pairs: Vec<(Tensor, Tensor)> = (0..BATCH)
        .map(|_| {
            (
                Tensor::uniform([3, side, side], 1.0, rng),
                Tensor::uniform([3, side, side], 1.0, rng),
            )
        })
        .collect();
    let refs: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(q, r)| (q, r)).collect();
    let analytic = batch_gradients(&model, &refs)?.grads;

    let names = model.trainable.names();
    let mut rows = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let coords = live_coords(name, model.trainable.tensors()[i], per_tensor, rng);
        let mut probe = model.clone();
        let (mut worst, mut abs_worst) = (0.0f64, 0.0f64);
        for &c in &coords {
            let orig = probe.trainable.tensors()[i].data()[c];
            probe.trainable.tensors_mut()[i].data_mut()[c] = orig + FD_EPS;
            let fp = inference_loss(&probe, &pairs)?;
            probe.trainable.tensors_mut()[i].data_mut()[c] = orig - FD_EPS;
            let fm = inference_loss(&probe, &pairs)?;
            probe.trainable.tensors_mut()[i].data_mut()[c] = orig;
            let n = (fp - fm) / (2.0 * FD_EPS);
            let a = analytic[i][c];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
            abs_worst = abs_worst.max((a - n).abs().max(a.abs()));
        }
        rows.push(if name.ends_with("b_pool2") {
            GradRow {
                module: "composition",
                tensor: name.clone(),
                coords: coords.len(),
                error: abs_worst,
                metric: Metric::Absolute,
            }
        } else {
            relative_row("composition", name, coords.len(), worst)
        });
    }
    Ok(rows)
}

/// Runs every check; `per_tensor` caps the coordinates probed per tensor
/// and `composition_per_tensor` those of the full describe-to-loss chain.
pub fn run_gradient_suite(seed: u64, per_tensor: usize, composition_per_tensor: usize) -> Result<GradSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = mfea_rows(&mut rng, per_tensor)?;
    rows.extend(fasa_rows(&mut rng, per_tensor)?);
    rows.extend(info_nce_rows(&mut rng)?);
    rows.extend(composition_rows(&mut rng, composition_per_tensor)?);
    Ok(GradSuite { rows })
}
