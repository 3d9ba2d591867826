//! `key = value` settings files shared by data generation and training.

use std::path::Path;

use crate::data::DataConfig;
use crate::error::{BggError, Result};
use crate::train::TrainConfig;

/// Combined data and training settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub data: DataConfig,
    pub train: TrainConfig,
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BggError::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    /// Applies one setting. `seed` and `image_size` set both sides; a
    /// `data.` prefix addresses the data side only.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" || key == "image_size" {
            self.data.set(key, value)?;
            return self.train.set(key, value);
        }
        if let Some(k) = key.strip_prefix("data.") {
            return self.data.set(k, value);
        }
        match self.train.set(key, value) {
            Ok(()) => Ok(()),
            Err(_) if self.data.set(key, value).is_ok() => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_pairs(text)? {
            s.set(&k, &v)?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BggError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.data.image_size != self.train.model.backbone.image_size {
            return Err(BggError::Config(format!(
                "data image_size {} differs from backbone image_size {}",
                self.data.image_size, self.train.model.backbone.image_size
            )));
        }
        Ok(())
    }
}
