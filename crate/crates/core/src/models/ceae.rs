use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random square cut-outs applied to training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub min_masks: usize,
    pub max_masks: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            min_masks: 1,
            max_masks: 3,
            min_side: 8,
            max_side: 16,
        }
    }
}

/// Zeroes 1–3 random squares per image; returns the masked batch and the
/// `{0,1}` mask that was applied.
pub fn ceae_mask<R: Rng + ?Sized>(batch: &Tensor, rng: &mut R, cfg: &MaskConfig) -> Result<(Tensor, Tensor)> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::dim("ceae_mask", shape, &[0, 1, 64, 64]));
    }
    if cfg.min_masks > cfg.max_masks || cfg.min_side > cfg.max_side || cfg.min_side == 0 {
        return Err(Error::Config(format!("inconsistent mask config {cfg:?}")));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if cfg.max_side > h.min(w) {
        return Err(Error::Config(format!("mask side {} exceeds image {h}×{w}", cfg.max_side)));
    }
    let mut mask = vec![0.0; n * h * w];
    for s in 0..n {
        if cfg.max_masks == 0 {
            continue;
        }
        let count = rng.random_range(cfg.min_masks..=cfg.max_masks);
        let img = &mut mask[s * h * w..(s + 1) * h * w];
        for _ in 0..count {
            let side = rng.random_range(cfg.min_side..=cfg.max_side);
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            for y in top..top + side {
                img[y * w + left..y * w + left + side].fill(1.0);
            }
        }
    }
    let masked = batch
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, m)| v * (1.0 - m))
        .collect();
    Ok((Tensor::new(shape, masked)?, Tensor::new(shape, mask)?))
}
