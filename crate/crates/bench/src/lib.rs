//! Deterministic inputs shared by the benchmarks under `benches/`.

use bgg_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `[3, side, side]` image with values in `[0, 1)`.
pub fn image(side: usize, seed: u64) -> Tensor {
    Tensor::uniform([3, side, side], 1.0, &mut rng(seed))
}

/// `n` aligned `(query, reference)` image pairs.
pub fn pairs(n: usize, side: usize, seed: u64) -> Vec<(Tensor, Tensor)> {
    (0..n as u64)
        .map(|i| (image(side, seed + 2 * i), image(side, seed + 2 * i + 1)))
        .collect()
}
