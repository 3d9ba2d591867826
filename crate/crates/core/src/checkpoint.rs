//! Byte-exact checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BGGCKPT\0" | u32 version | u32 section count
//! per section: u16 name length | name | u8 dtype | u64 offset | u64 length
//! section payloads, in table order
//! ```
//!
//! Tensor payloads are `u32 count` then per tensor
//! `u8 requires_grad | u32 rank | u64 dims… | f64 values…`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::BackboneParams;
use crate::error::{BggError, Result};
use crate::model::{BggModel, TrainableParams};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"BGGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    Utf8 = 0,
    F64Tensors = 1,
    U64 = 2,
    Bytes = 3,
}

impl Dtype {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Dtype::Utf8,
            1 => Dtype::F64Tensors,
            2 => Dtype::U64,
            3 => Dtype::Bytes,
            _ => return Err(BggError::format("checkpoint", format!("unknown dtype tag {v}"))),
        })
    }
}

/// Sampler position: seed, stream and word position of the ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn encode(&self) -> Vec<u8> {
        let mut v = self.seed.to_vec();
        v.extend_from_slice(&self.stream.to_le_bytes());
        v.extend_from_slice(&self.word_pos.to_le_bytes());
        v
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() != 32 + 8 + 16 {
            return Err(BggError::format("checkpoint", "rng section has wrong length"));
        }
        Ok(Self {
            seed: b[..32].try_into().unwrap(),
            stream: u64::from_le_bytes(b[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(b[40..56].try_into().unwrap()),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: BggModel,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

fn encode_tensors(ts: &[&Tensor]) -> Vec<u8> {
    let mut v = Vec::new();
    v.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        v.push(t.requires_grad() as u8);
        v.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            v.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            v.extend_from_slice(&x.to_le_bytes());
        }
    }
    v
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| BggError::format("checkpoint", "truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(BggError::format("checkpoint", "trailing bytes in section"))
        }
    }
}

fn decode_tensors(b: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf: b, pos: 0 };
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let grad = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(BggError::format("checkpoint", format!("bad requires_grad flag {v}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| BggError::format("checkpoint", "tensor size overflow"))?;
        let bytes = r.take(
            len.checked_mul(8)
                .ok_or_else(|| BggError::format("checkpoint", "tensor size overflow"))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(grad);
        out.push(t);
    }
    r.done()?;
    Ok(out)
}

/// Moves decoded tensors into `dst` in order, checking shapes and flags.
fn fill(dst: Vec<&mut Tensor>, src: Vec<Tensor>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(BggError::format(
            "checkpoint",
            format!("{what}: expected {} tensors, found {}", dst.len(), src.len()),
        ));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.shape() != s.shape() || d.requires_grad() != s.requires_grad() {
            return Err(BggError::format(
                "checkpoint",
                format!("{what}[{i}]: expected {:?}, found {:?}", d.shape(), s.shape()),
            ));
        }
        *d = s;
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut optim = Vec::new();
        optim.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let moments: Vec<Tensor> = self
            .optimizer
            .m
            .iter()
            .chain(&self.optimizer.v)
            .map(|x| Tensor::new([x.len()], x.clone()).expect("moments are finite"))
            .collect();
        optim.extend(encode_tensors(&moments.iter().collect::<Vec<_>>()));
        let sections: Vec<(&str, Dtype, Vec<u8>)> = vec![
            ("config", Dtype::Utf8, self.train.render().into_bytes()),
            ("backbone", Dtype::F64Tensors, encode_tensors(&m.backbone.tensors())),
            ("backbone_hash", Dtype::Utf8, m.backbone.hash().into_bytes()),
            ("trainable", Dtype::F64Tensors, encode_tensors(&m.trainable.tensors())),
            ("optimizer", Dtype::Bytes, optim),
            ("rng", Dtype::Bytes, self.rng.encode()),
            ("step", Dtype::U64, self.optimizer.step.to_le_bytes().to_vec()),
        ];
        let table_len: usize = sections.iter().map(|(n, _, _)| 2 + n.len() + 1 + 16).sum();
        let mut offset = (8 + 4 + 4 + table_len) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, dtype, body) in &sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*dtype as u8);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            offset += body.len() as u64;
        }
        for (_, _, body) in &sections {
            out.extend_from_slice(body);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |d: String| BggError::format("checkpoint", d);
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("missing BGGCKPT magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut sections = std::collections::BTreeMap::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("section name is not UTF-8".into()))?
                .to_string();
            let dtype = Dtype::from_u8(r.u8()?)?;
            let off = r.u64()? as usize;
            let size = r.u64()? as usize;
            let body = off
                .checked_add(size)
                .and_then(|end| buf.get(off..end))
                .ok_or_else(|| bad(format!("section {name} out of bounds")))?;
            sections.insert(name, (dtype, body));
        }
        let get = |name: &str, want: Dtype| -> Result<&[u8]> {
            match sections.get(name) {
                Some(&(d, b)) if d == want => Ok(b),
                Some(&(d, _)) => Err(bad(format!("section {name} has dtype {d:?}, expected {want:?}"))),
                None => Err(bad(format!("missing section {name}"))),
            }
        };
        let text = |name: &str| -> Result<String> {
            String::from_utf8(get(name, Dtype::Utf8)?.to_vec()).map_err(|_| bad(format!("{name} is not UTF-8")))
        };
        let train = TrainConfig::parse(&text("config")?)?;
        let mut backbone = BackboneParams::init(&train.model.backbone)?;
        fill(
            backbone.tensors_mut(),
            decode_tensors(get("backbone", Dtype::F64Tensors)?)?,
            "backbone",
        )?;
        let stored_hash = text("backbone_hash")?;
        let actual = backbone.hash();
        if stored_hash != actual {
            return Err(bad(format!(
                "backbone hash mismatch: header {stored_hash}, blob {actual}"
            )));
        }
        let mut trainable = TrainableParams::init(&train.model, train.seed)?;
        fill(
            trainable.tensors_mut(),
            decode_tensors(get("trainable", Dtype::F64Tensors)?)?,
            "trainable",
        )?;
        let model = BggModel::from_parts(train.model.clone(), backbone, trainable)?;
        let ob = get("optimizer", Dtype::Bytes)?;
        if ob.len() < 8 {
            return Err(bad("optimizer section too short".into()));
        }
        let step = u64::from_le_bytes(ob[..8].try_into().unwrap());
        let moments = decode_tensors(&ob[8..])?;
        let k = model.trainable.tensors().len();
        if moments.len() != 2 * k {
            return Err(bad(format!(
                "expected {} moment tensors, found {}",
                2 * k,
                moments.len()
            )));
        }
        let mut moments: Vec<Vec<f64>> = moments.into_iter().map(Tensor::into_data).collect();
        let v = moments.split_off(k);
        for (i, t) in model.trainable.tensors().iter().enumerate() {
            if moments[i].len() != t.numel() || v[i].len() != t.numel() {
                return Err(bad(format!("moment {i} does not match its parameter")));
            }
        }
        let optimizer = OptimizerState {
            config: train.optim.clone(),
            step,
            m: moments,
            v,
        };
        let step_field = get("step", Dtype::U64)?;
        if step_field.len() != 8 || u64::from_le_bytes(step_field.try_into().unwrap()) != step {
            return Err(bad("step field disagrees with optimizer state".into()));
        }
        let rng = RngState::decode(get("rng", Dtype::Bytes)?)?;
        Ok(Self {
            train,
            model,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| BggError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| BggError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let buf = fs::read(path).map_err(|e| BggError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}
