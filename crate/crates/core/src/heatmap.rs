//! Aggregation-weight heatmaps as 8-bit PGM images.

use std::fs;
use std::path::Path;

use crate::error::{BggError, Result};
use crate::model::BggModel;
use crate::tensor::Tensor;

/// Min-max scales `weights` to `0..=255` with `floor`, so only the maximum
/// reaches 255. A constant map becomes uniform 128.
pub fn weights_to_pixels(weights: &[f64]) -> Vec<u8> {
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![128; weights.len()];
    }
    weights
        .iter()
        .map(|&w| (255.0 * (w - lo) / range).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary PGM (P5) bytes of a `side × side` map.
pub fn encode_pgm(pixels: &[u8], side: usize) -> Result<Vec<u8>> {
    if pixels.len() != side * side {
        return Err(BggError::dim(
            "encode_pgm",
            format!("{} pixels for a {side}x{side} map", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// `g × g` map of the aggregation weights for `image`.
pub fn export_heatmap(model: &BggModel, image: &Tensor) -> Result<Vec<u8>> {
    let w = model.attention_weights(image)?;
    let g = model.config.backbone.grid();
    encode_pgm(&weights_to_pixels(w.data()), g)
}

pub fn write_heatmap(path: &Path, model: &BggModel, image: &Tensor) -> Result<()> {
    let bytes = export_heatmap(model, image)?;
    fs::write(path, bytes).map_err(|e| BggError::io(path, e))
}
