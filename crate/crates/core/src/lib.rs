//! Subject-customized latent video diffusion at desk scale.
//!
//! A tiny latent video denoiser learns a new subject from still images through
//! low-rank adapters on its spatial attention projections plus a learned
//! pseudo-token. Sampling runs deterministic DDIM with classifier-free
//! guidance while the adapter strength follows a two-level schedule: a small
//! scale for the first `K` denoising steps, a larger one afterwards.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod image;
pub mod latent;
pub mod lora;
pub mod manifest;
pub mod model;
pub(crate) mod nn;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod train;

pub use autoencoder::PixelAutoencoder;
pub use error::{Error, Result};
pub use image::RgbImage;
pub use latent::{LatentShape, LatentVideo};
pub use lora::{attach_adapters, lora_delta, merge_weights, AdapterMode, AdapterSet, LoraAdapter};
pub use model::{predict_noise, video_loss, ConditionEmbedding, DenoiserModel, ModelConfig};
pub use nn::{Linear, LoraGrad};

pub use schedule::{build_noise_schedule, forward_noise, NoiseSchedule, ScheduleKind};
pub use sampler::{sample_video, SamplerConfig};
pub use text::ToyTextEncoder;
pub use train::{train, TrainConfig};

