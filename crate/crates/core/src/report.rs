//! Trainable versus frozen parameter accounting.

use std::fmt;

use crate::backbone::BackboneParams;
use crate::fasa::FasaParams;
use crate::loss::TemperatureParam;
use crate::mfea::MfeaParams;
use crate::model::BggModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub module: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub trainable: usize,
}

impl ParameterReport {
    pub fn frozen(&self) -> usize {
        self.total - self.trainable
    }

    pub fn trainable_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }

    /// Trainable entries only.
    pub fn trainable_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    /// Element counts summed per module, in first-seen order.
    pub fn by_module(&self) -> Vec<(String, usize, bool)> {
        let mut out: Vec<(String, usize, bool)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(m, _, _)| *m == e.module) {
                Some(slot) => slot.1 += e.count,
                None => out.push((e.module.clone(), e.count, e.trainable)),
            }
        }
        out
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10}  status", "module", "params")?;
        for (m, n, t) in self.by_module() {
            writeln!(f, "{:<12} {:>10}  {}", m, n, if t { "trainable" } else { "frozen" })?;
        }
        writeln!(f, "total        {:>10}", self.total)?;
        writeln!(f, "trainable    {:>10}", self.trainable)?;
        writeln!(f, "frozen       {:>10}", self.frozen())?;
        write!(f, "ratio        {:>10.4}", self.trainable_ratio())
    }
}

fn push(entries: &mut Vec<ParamEntry>, module: &str, names: &[&str], tensors: &[&Tensor]) {
    for (n, t) in names.iter().zip(tensors) {
        entries.push(ParamEntry {
            module: module.to_string(),
            name: n.to_string(),
            shape: t.shape().to_vec(),
            count: t.numel(),
            trainable: t.requires_grad(),
        });
    }
}

/// Counts every tensor, classifying by its `requires_grad` flag.
pub fn freeze_report(
    backbone: &BackboneParams,
    adapters: &[Option<MfeaParams>],
    fasa: Option<&FasaParams>,
    temperature: Option<&TemperatureParam>,
) -> ParameterReport {
    let mut entries = Vec::new();
    push(
        &mut entries,
        "backbone",
        crate::backbone::EmbedParams::NAMES,
        &backbone.embed.tensors(),
    );
    for b in &backbone.blocks {
        push(
            &mut entries,
            "backbone",
            crate::backbone::BlockParams::NAMES,
            &b.tensors(),
        );
    }
    for (i, a) in adapters.iter().enumerate() {
        if let Some(a) = a {
            push(&mut entries, &format!("mfea.{i}"), MfeaParams::NAMES, &a.tensors());
        }
    }
    if let Some(p) = fasa {
        push(&mut entries, "fasa", FasaParams::NAMES, &p.tensors());
    }
    if let Some(t) = temperature {
        push(&mut entries, "tau", &["free"], &[&t.free]);
    }
    let total = entries.iter().map(|e| e.count).sum();
    let trainable = entries.iter().filter(|e| e.trainable).map(|e| e.count).sum();
    ParameterReport {
        entries,
        total,
        trainable,
    }
}

impl BggModel {
    pub fn param_report(&self) -> ParameterReport {
        freeze_report(
            &self.backbone,
            &self.trainable.adapters,
            Some(&self.trainable.fasa),
            Some(&self.trainable.temperature),
        )
    }
}
