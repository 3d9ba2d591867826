//! Contrastive training loop over aligned query/reference pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{DatasetManifest, LoadedLocation, Split};
use crate::error::{BggError, Result};
use crate::fanout;
use crate::loss::symmetric_loss_grads;
use crate::model::{BggModel, ModelConfig};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::params::collect_grads;
use crate::retrieval::{evaluate_locations, reports_csv, DirectionSel, RetrievalReport};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub steps: usize,
    pub batch: usize,
    /// Seeds trainable initialization and batch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: AdamWConfig::default(),
            steps: 200,
            batch: 16,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.batch == 0 {
            return Err(BggError::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; [`TrainConfig::set`] inverts it.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let b = &self.model.backbone;
        vec![
            ("image_size", b.image_size.to_string()),
            ("patch_size", b.patch_size.to_string()),
            ("depth", b.depth.to_string()),
            ("dim", b.dim.to_string()),
            ("heads", b.heads.to_string()),
            ("ffn_ratio", b.ffn_ratio.to_string()),
            ("backbone_seed", b.seed.to_string()),
            ("bottleneck", self.model.bottleneck.to_string()),
            ("lambda", self.model.lambda.to_string()),
            ("adapters", self.model.adapters.to_string()),
            ("lr", self.optim.lr.to_string()),
            ("beta1", self.optim.beta1.to_string()),
            ("beta2", self.optim.beta2.to_string()),
            ("eps", self.optim.eps.to_string()),
            ("weight_decay", self.optim.weight_decay.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || BggError::Config(format!("bad value '{value}' for key '{key}'"));
        macro_rules! p {
            ($f:expr) => {
                $f = value.parse().map_err(|_| bad())?
            };
        }
        let b = &mut self.model.backbone;
        match key {
            "image_size" => p!(b.image_size),
            "patch_size" => p!(b.patch_size),
            "depth" => p!(b.depth),
            "dim" => p!(b.dim),
            "heads" => p!(b.heads),
            "ffn_ratio" => p!(b.ffn_ratio),
            "backbone_seed" => p!(b.seed),
            "bottleneck" => p!(self.model.bottleneck),
            "lambda" => p!(self.model.lambda),
            "adapters" => p!(self.model.adapters),
            "lr" => p!(self.optim.lr),
            "beta1" => p!(self.optim.beta1),
            "beta2" => p!(self.optim.beta2),
            "eps" => p!(self.optim.eps),
            "weight_decay" => p!(self.optim.weight_decay),
            "steps" => p!(self.steps),
            "batch" => p!(self.batch),
            "seed" => p!(self.seed),
            _ => return Err(BggError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in crate::config::parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    /// Temperature used for this step's loss.
    pub tau: f64,
}

/// Mutable training state: model, optimizer and sampler.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: BggModel,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = BggModel::new(&config.model, config.seed)?;
        let optimizer = OptimizerState::new(config.optim.clone(), &model.trainable.tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            rng,
        })
    }

    /// Resumes from a checkpoint's model, optimizer and sampler state.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        Ok(Self {
            rng: ckpt.rng.restore(),
            config: ckpt.train,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Draws `batch` distinct locations and one query view of each.
    pub fn sample_pairs<'a>(&mut self, data: &'a [LoadedLocation]) -> Result<Vec<(&'a Tensor, &'a Tensor)>> {
        let b = self.config.batch;
        if b > data.len() {
            return Err(BggError::Config(format!(
                "batch {b} exceeds the {} training locations",
                data.len()
            )));
        }
        let picks = sample(&mut self.rng, data.len(), b).into_vec();
        let mut out = Vec::with_capacity(b);
        for i in picks {
            let loc = &data[i];
            if loc.queries.is_empty() {
                return Err(BggError::Config(format!(
                    "location {} has no query views",
                    loc.location_id
                )));
            }
            let q = self.rng.gen_range(0..loc.queries.len());
            out.push((&loc.queries[q], &loc.reference));
        }
        Ok(out)
    }

    /// One optimizer step on aligned `(query, reference)` pairs.
    pub fn step_on(&mut self, pairs: &[(&Tensor, &Tensor)]) -> Result<LossRecord> {
        let tau = self.model.trainable.temperature.tau();
        let bg = batch_gradients(&self.model, pairs)?;
        let mut params = self.model.trainable.tensors_mut();
        for (p, g) in params.iter_mut().zip(&bg.grads) {
            p.zero_grad();
            if p.requires_grad() {
                p.accumulate_grad(g)?;
            }
        }
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect();
        adamw_step(&mut params, &grads, &mut self.optimizer)?;
        Ok(LossRecord {
            step: self.optimizer.step,
            loss: bg.loss,
            tau,
        })
    }

    pub fn step(&mut self, data: &[LoadedLocation]) -> Result<LossRecord> {
        let pairs = self.sample_pairs(data)?;
        self.step_on(&pairs)
    }

    /// Runs the configured number of steps; `on_step` sees every record.
    pub fn run(&mut self, data: &[LoadedLocation], mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut out = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let rec = self.step(data)?;
            on_step(&rec);
            out.push(rec);
        }
        Ok(out)
    }
}

/// Batch loss and its gradient for every trainable tensor, in
/// [`TrainableParams::tensors`](crate::model::TrainableParams::tensors) order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Describes every image on its own tape in the worker pool, evaluates the
/// symmetric loss on the stacked descriptors, then seeds each tape with its
/// descriptor's loss gradient. Per-image gradients are summed in image order.
pub fn batch_gradients(model: &BggModel, pairs: &[(&Tensor, &Tensor)]) -> Result<BatchGradients> {
    let b = pairs.len();
    let images: Vec<&Tensor> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
    let mut passes: Vec<(Tape, crate::model::DescribeOutput)> = fanout::pool().install(|| {
        images
            .par_iter()
            .map(|im| {
                let mut tape = Tape::new();
                let out = model.describe_on_tape(&mut tape, im, |t, _, x| t.leaf(x))?;
                Ok((tape, out))
            })
            .collect::<Result<_>>()
    })?;
    let dim = model.config.descriptor_dim();
    let stack = |range: std::ops::Range<usize>| -> Result<Tensor> {
        let mut v = Vec::with_capacity(b * dim);
        for (tape, out) in &passes[range] {
            v.extend_from_slice(tape.value(out.z));
        }
        Tensor::new([b, dim], v)
    };
    let q = stack(0..b)?;
    let r = stack(b..2 * b)?;
    let lg = symmetric_loss_grads(&q, &r, &model.trainable.temperature)?;
    let per_image: Vec<Vec<Vec<f64>>> = fanout::pool().install(|| {
        passes
            .par_iter_mut()
            .enumerate()
            .map(|(i, (tape, out))| {
                let seed = if i < b {
                    &lg.dq[i * dim..(i + 1) * dim]
                } else {
                    &lg.dr[(i - b) * dim..(i - b + 1) * dim]
                };
                tape.backward_with(out.z, seed)?;
                Ok(collect_grads(tape, &out.vars.vars()))
            })
            .collect::<Result<_>>()
    })?;
    drop(passes);
    let mut grads: Vec<Vec<f64>> = model.trainable.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for image in &per_image {
        for (acc, g) in grads.iter_mut().zip(image) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }
    if let Some(last) = grads.last_mut() {
        last[0] += lg.dfree;
    }
    Ok(BatchGradients { loss: lg.loss, grads })
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,tau\n");
    for r in records {
        let _ = writeln!(s, "{},{:.12},{:.12}", r.step, r.loss, r.tau);
    }
    s
}

/// Files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub losses: Vec<LossRecord>,
    pub reports: Vec<RetrievalReport>,
    pub checkpoint_path: PathBuf,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

pub const CHECKPOINT_FILE: &str = "final.bgg";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains on the dataset's train split, evaluates the test split, and writes
/// `loss.csv`, `metrics.csv` and `final.bgg` into `out`.
pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out: &Path,
    on_step: impl FnMut(&LossRecord),
) -> Result<TrainArtifacts> {
    config.validate()?;
    if manifest.image_size() != config.model.backbone.image_size {
        return Err(BggError::Config(format!(
            "dataset images are {} px, backbone expects {}",
            manifest.image_size(),
            config.model.backbone.image_size
        )));
    }
    let train_set = manifest.load_split(Split::Train)?;
    let test_set = manifest.load_split(Split::Test)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(BggError::Config("dataset needs non-empty train and test splits".into()));
    }
    fs::create_dir_all(out).map_err(|e| BggError::io(out, e))?;
    let mut trainer = Trainer::new(config)?;
    let before = trainer.model.backbone.hash();
    let losses = trainer.run(&train_set, on_step)?;
    let after = trainer.model.backbone.hash();
    let reports = evaluate_locations(&trainer.model, &test_set, DirectionSel::Both)?;
    let write = |name: &str, body: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| BggError::io(&p, e))
    };
    write(LOSS_FILE, &loss_csv(&losses))?;
    write(METRICS_FILE, &reports_csv(&reports))?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint_path)?;
    Ok(TrainArtifacts {
        losses,
        reports,
        checkpoint_path,
        backbone_hash_before: before,
        backbone_hash_after: after,
    })
}
