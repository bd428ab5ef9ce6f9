use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Light augmentation for triplet positives: additive Gaussian jitter, then
/// a magnitude scale drawn uniformly from `[1 - scale, 1 + scale]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub jitter_std: f64,
    pub scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_std: 0.02,
            scale: 0.05,
        }
    }
}

/// Augments one window (any shape). The scale factor is drawn once per window.
pub fn augment_light<T: Scalar, R: Rng + ?Sized>(
    window: &[T],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<T> {
    let factor = if cfg.scale > 0.0 {
        rng.random_range(1.0 - cfg.scale..=1.0 + cfg.scale)
    } else {
        1.0
    };
    window
        .iter()
        .map(|&x| {
            let jitter = if cfg.jitter_std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                z * cfg.jitter_std
            } else {
                0.0
            };
            T::lit((x.as_f64() + jitter) * factor)
        })
        .collect()
}

/// Augments every window of a `[B, ...]` batch independently.
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(
    batch: &Tensor<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Tensor<T> {
    let b = batch.shape()[0].max(1);
    let per = batch.len() / b;
    let data: Vec<T> = batch
        .data()
        .chunks(per.max(1))
        .flat_map(|w| augment_light(w, cfg, rng))
        .collect();
    Tensor::new(batch.shape(), data).expect("augmentation preserves shape")
}
