//! End-to-end descriptor pipeline: adapted backbone, aggregation, and the
//! normalized `[cls; pooled]` descriptor.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::error::{BggError, Result};
use crate::fanout;
use crate::fasa::{self, FasaParams, FasaVars};
use crate::loss::TemperatureParam;
use crate::mfea::{BoundMfea, MfeaConfig, MfeaParams, MfeaVars};
use crate::tensor::Tensor;

/// Default adapter scale.
pub const LAMBDA: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Adapter bottleneck `D'`.
    pub bottleneck: usize,
    pub lambda: f64,
    /// Insert an adapter into every block; `false` gives the frozen baseline.
    pub adapters: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            bottleneck: backbone.dim / 4,
            backbone,
            lambda: LAMBDA,
            adapters: true,
        }
    }
}

impl ModelConfig {
    pub fn mfea(&self) -> MfeaConfig {
        MfeaConfig {
            dim: self.backbone.dim,
            bottleneck: self.bottleneck,
            grid: self.backbone.grid(),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        2 * self.backbone.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !self.lambda.is_finite() {
            return Err(BggError::Config(format!("lambda {} is not finite", self.lambda)));
        }
        if self.adapters {
            self.mfea().validate()?;
        }
        crate::fft::check_extent("grid", self.backbone.grid())
    }
}

/// Everything the optimizer updates: per-block adapters, the aggregator and
/// the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub adapters: Vec<Option<MfeaParams>>,
    pub fasa: FasaParams,
    pub temperature: TemperatureParam,
}

/// Tape handles for [`TrainableParams`].
#[derive(Clone, Debug)]
pub struct TrainableVars {
    pub adapters: Vec<Option<MfeaVars>>,
    pub fasa: FasaVars,
    pub free_tau: Var,
}

impl TrainableVars {
    /// Handles in [`TrainableParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for a in self.adapters.iter().flatten() {
            out.extend(a.vars());
        }
        out.extend(self.fasa.vars());
        out.push(self.free_tau);
        out
    }
}

impl TrainableParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mcfg = cfg.mfea();
        let adapters = (0..cfg.backbone.depth)
            .map(|_| {
                if cfg.adapters {
                    MfeaParams::init(&mcfg, &mut rng).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let fasa = FasaParams::init(cfg.backbone.dim, cfg.backbone.grid(), &mut rng)?;
        Ok(Self {
            adapters,
            fasa,
            temperature: TemperatureParam::default(),
        })
    }

    /// Fixed order: adapters by block, aggregator, temperature.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for a in self.adapters.iter().flatten() {
            out.extend(a.tensors());
        }
        out.extend(self.fasa.tensors());
        out.push(&self.temperature.free);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for a in self.adapters.iter_mut().flatten() {
            out.extend(a.tensors_mut());
        }
        out.extend(self.fasa.tensors_mut());
        out.push(&mut self.temperature.free);
        out
    }

    /// Dotted names aligned with [`TrainableParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, a) in self.adapters.iter().enumerate() {
            if a.is_some() {
                out.extend(MfeaParams::NAMES.iter().map(|n| format!("mfea.{i}.{n}")));
            }
        }
        out.extend(FasaParams::NAMES.iter().map(|n| format!("fasa.{n}")));
        out.push("tau.free".into());
        out
    }

    pub fn count(&self) -> usize {
        crate::params::count(&self.tensors())
    }

    /// Binds every tensor via `f(tape, global_index, tensor)`.
    pub fn bind_with(&self, tape: &mut Tape, mut f: impl FnMut(&mut Tape, usize, &Tensor) -> Var) -> TrainableVars {
        let mut base = 0usize;
        let mut adapters = Vec::with_capacity(self.adapters.len());
        for a in &self.adapters {
            adapters.push(a.as_ref().map(|p| {
                let v = p.bind_with(tape, |t, i, x| f(t, base + i, x));
                base += MfeaParams::NAMES.len();
                v
            }));
        }
        let fasa = self.fasa.bind_with(tape, |t, i, x| f(t, base + i, x));
        base += FasaParams::NAMES.len();
        let free_tau = f(tape, base, &self.temperature.free);
        TrainableVars {
            adapters,
            fasa,
            free_tau,
        }
    }
}

/// Unit-norm `[2D]` image descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub vec: Tensor,
    pub l2_normalized: bool,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.vec.numel()
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.vec.data().iter().zip(other.vec.data()).map(|(a, b)| a * b).sum()
    }

    pub fn cosine(&self, other: &Descriptor) -> f64 {
        let n = |d: &Descriptor| d.vec.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.dot(other) / (n(self) * n(other)).max(1e-300)
    }
}

/// Tape handles produced by one descriptor pass.
pub struct DescribeOutput {
    /// Normalized `[2D]` descriptor.
    pub z: Var,
    pub cls: Var,
    pub pooled: Var,
    /// Aggregation weights `[L]`.
    pub weights: Var,
    pub vars: TrainableVars,
}

/// Which side of a cross-view pair an image comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Query,
    Reference,
}

/// Encoder exposing the parameter set used for each view.
pub trait ViewEncoder {
    fn branch(&self, view: View) -> &TrainableParams;
}

/// True iff both views are encoded by one and the same parameter set.
pub fn shared_weights_check<E: ViewEncoder + ?Sized>(encoder: &E) -> bool {
    std::ptr::eq(encoder.branch(View::Query), encoder.branch(View::Reference))
}

/// Image-to-descriptor map used by evaluation. `location` is available to
/// oracle doubles; real models ignore it.
pub trait Describer: Sync {
    fn describe_labeled(&self, image: &Tensor, location: u32) -> Result<Descriptor>;
}

/// Frozen backbone plus trainable adapters, aggregator and temperature.
#[derive(Debug)]
pub struct BggModel {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub trainable: TrainableParams,
    describe_calls: AtomicU64,
}

impl Clone for BggModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            trainable: self.trainable.clone(),
            describe_calls: AtomicU64::new(self.describe_calls()),
        }
    }
}

impl ViewEncoder for BggModel {
    fn branch(&self, _view: View) -> &TrainableParams {
        &self.trainable
    }
}

impl Describer for BggModel {
    fn describe_labeled(&self, image: &Tensor, _location: u32) -> Result<Descriptor> {
        self.describe(image)
    }
}

impl BggModel {
    /// Backbone from `config.backbone.seed`, trainable sets from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let backbone = BackboneParams::init(&config.backbone)?;
        let trainable = TrainableParams::init(config, seed)?;
        Self::from_parts(config.clone(), backbone, trainable)
    }

    pub fn from_parts(config: ModelConfig, backbone: BackboneParams, trainable: TrainableParams) -> Result<Self> {
        config.validate()?;
        if backbone.config != config.backbone {
            return Err(BggError::Config(
                "backbone parameters were built for another config".into(),
            ));
        }
        if trainable.adapters.len() != config.backbone.depth {
            return Err(BggError::Config(format!(
                "{} adapter slots for depth {}",
                trainable.adapters.len(),
                config.backbone.depth
            )));
        }
        Ok(Self {
            config,
            backbone,
            trainable,
            describe_calls: AtomicU64::new(0),
        })
    }

    /// Number of images described so far.
    pub fn describe_calls(&self) -> u64 {
        self.describe_calls.load(Ordering::Relaxed)
    }

    pub fn reset_describe_calls(&self) {
        self.describe_calls.store(0, Ordering::Relaxed);
    }

    /// Records one descriptor pass with trainable tensors bound via `bind`.
    pub fn describe_on_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        bind: impl FnMut(&mut Tape, usize, &Tensor) -> Var,
    ) -> Result<DescribeOutput> {
        let bb = self.backbone.bind(tape);
        let vars = self.trainable.bind_with(tape, bind);
        let mcfg = self.config.mfea();
        let adapters: Vec<Option<BoundMfea>> = vars
            .adapters
            .iter()
            .map(|a| {
                a.map(|v| BoundMfea {
                    vars: v,
                    cfg: mcfg.clone(),
                })
            })
            .collect();
        let (cls, patches) = backbone::forward(tape, image, &self.config.backbone, &bb, &adapters, self.config.lambda)?;
        let (pooled, weights) = fasa::fasa_forward_with_weights(tape, patches, &vars.fasa)?;
        let cat = tape.concat(&[cls, pooled], 0)?;
        let z = tape.l2_normalize(cat)?;
        Ok(DescribeOutput {
            z,
            cls,
            pooled,
            weights,
            vars,
        })
    }

    /// Inference pass; the tape carries no gradients.
    pub fn describe(&self, image: &Tensor) -> Result<Descriptor> {
        let mut tape = Tape::new();
        let out = self.describe_on_tape(&mut tape, image, |t, _, x| t.constant(x))?;
        self.describe_calls.fetch_add(1, Ordering::Relaxed);
        Ok(Descriptor {
            vec: tape.tensor(out.z),
            l2_normalized: true,
        })
    }

    /// Aggregation weights `[L]` for one image.
    pub fn attention_weights(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.describe_on_tape(&mut tape, image, |t, _, x| t.constant(x))?;
        Ok(tape.tensor(out.weights))
    }

    /// Order-preserving [`BggModel::describe`] over a batch, fanned out on
    /// the shared pool.
    pub fn describe_batch(&self, images: &[Tensor]) -> Result<Vec<Descriptor>> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(BggError::dim(
                    "describe_batch",
                    format!("{:?} vs {:?}", bad.shape(), first.shape()),
                ));
            }
        }
        fanout::pool().install(|| images.par_iter().map(|im| self.describe(im)).collect())
    }
}

const DESC_MAGIC: &[u8; 4] = b"BGGD";
const DESC_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DESC_HEADER: usize = 32;

/// Writes descriptors as a row-major `count × dim` little-endian f64 matrix
/// behind a 32-byte header.
pub fn write_descriptors(path: &Path, descs: &[Descriptor]) -> Result<()> {
    let dim = descs.first().map_or(0, Descriptor::dim);
    if let Some(d) = descs.iter().find(|d| d.dim() != dim) {
        return Err(BggError::dim(
            "write_descriptors",
            format!("width {} vs {dim}", d.dim()),
        ));
    }
    let mut buf = Vec::with_capacity(DESC_HEADER + descs.len() * dim * 8);
    buf.extend_from_slice(DESC_MAGIC);
    buf.extend_from_slice(&DESC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(descs.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    buf.push(DTYPE_F64);
    buf.resize(DESC_HEADER, 0);
    for d in descs {
        for v in d.vec.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| BggError::io(path, e))?;
    f.write_all(&buf).map_err(|e| BggError::io(path, e))
}

/// Reads a matrix written by [`write_descriptors`]; rows are re-checked for
/// unit norm.
pub fn read_descriptors(path: &Path) -> Result<Vec<Descriptor>> {
    let buf = fs::read(path).map_err(|e| BggError::io(path, e))?;
    let bad = |d: String| BggError::format("descriptor file", d);
    if buf.len() < DESC_HEADER || &buf[..4] != DESC_MAGIC {
        return Err(bad("missing BGGD header".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != DESC_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    if buf[24] != DTYPE_F64 {
        return Err(bad(format!("unsupported dtype tag {}", buf[24])));
    }
    let need = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(DESC_HEADER))
        .ok_or_else(|| bad("size overflow".into()))?;
    if buf.len() != need {
        return Err(bad(format!("expected {need} bytes, found {}", buf.len())));
    }
    let mut out = Vec::with_capacity(count);
    for r in 0..count {
        let row: Vec<f64> = buf[DESC_HEADER + r * dim * 8..DESC_HEADER + (r + 1) * dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let vec = Tensor::new([dim], row)?;
        out.push(Descriptor {
            vec,
            l2_normalized: (norm - 1.0).abs() < 1e-6,
        });
    }
    Ok(out)
}
