#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subjectcraft_core::lora::{attach_adapters, AdapterMode, AdapterSet};
use subjectcraft_core::model::{DenoiserModel, ModelConfig, ScheduleConfig};
use subjectcraft_core::schedule::ScheduleKind;
use subjectcraft_core::{LatentShape, ToyTextEncoder};

pub fn tiny_model(steps: usize) -> DenoiserModel {
    DenoiserModel::new(ModelConfig {
        width: 8,
        cond_dim: 8,
        schedule: ScheduleConfig {
            steps,
            kind: ScheduleKind::LinearSignal,
        },
        seed: 5,
        ..ModelConfig::default()
    })
    .unwrap()
}

pub fn tiny_encoder(dim: usize) -> ToyTextEncoder {
    ToyTextEncoder::new(["a toy", "a photo of a toy"], dim, 8, 3).unwrap()
}

pub fn small_shape() -> LatentShape {
    LatentShape::new(3, 4, 4, 4).unwrap()
}

/// Adapters with every matrix drawn from U(-0.3, 0.3), so the residual path
/// is active (a fresh set has `B = 0`). Values sit on the f32 grid so they
/// survive a save/load unchanged.
pub fn random_adapters(model: &DenoiserModel, mode: AdapterMode, seed: u64) -> AdapterSet {
    let mut set = attach_adapters(model, 2, mode, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for a in set.iter_mut() {
        a.a.mapv_inplace(|_| rng.random_range(-0.3f32..0.3) as f64);
        a.b.mapv_inplace(|_| rng.random_range(-0.3f32..0.3) as f64);
    }
    set
}
