//! Deterministic DDIM with classifier-free guidance and a two-level adapter
//! strength schedule: `lambda_s` while `t > T − K`, `lambda_l` from `t = T − K` on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::lora::AdapterSet;
use crate::model::{ConditionEmbedding, DenoiserModel};
use crate::schedule::{build_noise_schedule, NoiseSchedule, ScheduleKind};
use crate::text::ToyTextEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Denoising steps `T`.
    pub steps: usize,
    pub guidance_scale: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    /// Number of leading steps run at `lambda_s`.
    pub switch_step: usize,
    pub seed: u64,
    pub shape: LatentShape,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 12.0,
            lambda_s: 0.4,
            lambda_l: 0.8,
            switch_step: 5,
            seed: 0,
            shape: LatentShape {
                frames: 8,
                height: 16,
                width: 16,
                channels: 4,
            },
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid!("T must be >= 1"));
        }
        if self.switch_step > self.steps {
            return Err(invalid!(
                "K must satisfy 0 ≤ K ≤ T (got K={}, T={})",
                self.switch_step,
                self.steps
            ));
        }
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_l", self.lambda_l)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(invalid!(
                "guidance scale must be finite and >= 0, got {}",
                self.guidance_scale
            ));
        }
        self.shape.validate()
    }
}

/// Adapter strength used when denoising step `t`.
pub fn lora_weight_at_step(t: usize, config: &SamplerConfig) -> Result<f64> {
    config.validate()?;
    if t == 0 || t > config.steps {
        return Err(invalid!("step {t} outside 1..={}", config.steps));
    }
    Ok(if t > config.steps - config.switch_step {
        config.lambda_s
    } else {
        config.lambda_l
    })
}

/// `ε_u + s·(ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &LatentVideo, eps_cond: &LatentVideo, guidance_scale: f64) -> Result<LatentVideo> {
    // Written as a difference so that equal inputs come back unchanged.
    let diff = eps_cond.affine_combine(1.0, eps_uncond, -1.0)?;
    eps_uncond.affine_combine(1.0, &diff, guidance_scale)
}

/// One η = 0 DDIM update from `t` to `t − 1`; at `t = 1` returns the `z₀` prediction.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    let (signal, noise) = sched.coefs(t)?;
    if signal == 0.0 {
        return Err(Error::SingularSchedule(t));
    }
    let pred_z0 = z_t.affine_combine(1.0 / signal, eps_hat, -noise / signal)?;
    if t == 1 {
        return Ok(pred_z0);
    }
    let (prev_signal, prev_noise) = sched.coefs(t - 1)?;
    pred_z0.affine_combine(prev_signal, eps_hat, prev_noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScale {
    pub t: usize,
    pub lora_scale: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: LatentVideo,
    /// Adapter strength seen by the denoiser, in denoising order (`t = T` first).
    pub scales: Vec<StepScale>,
    /// `z_T` followed by the latent after each step, when requested.
    pub trajectory: Vec<LatentVideo>,
}

/// Where the prompt conditions come from.
pub struct Prompts<'a> {
    pub encoder: &'a ToyTextEncoder,
    pub prompt: &'a str,
    /// `None` uses the all-padding condition.
    pub uncond_prompt: Option<&'a str>,
}

impl Prompts<'_> {
    fn encode(&self) -> Result<(ConditionEmbedding, ConditionEmbedding)> {
        let cond = self.encoder.encode_prompt(self.prompt)?;
        let uncond = match self.uncond_prompt {
            Some(p) if !p.trim().is_empty() => self.encoder.encode_prompt(p)?,
            _ => self.encoder.encode_unconditional(),
        };
        Ok((cond, uncond))
    }
}

/// Runs the full schedule from seeded `z_T ~ N(0, I)` down to `z₀`.
pub fn sample_video(
    model: &DenoiserModel,
    adapters: Option<&AdapterSet>,
    prompts: &Prompts<'_>,
    config: &SamplerConfig,
    record_trajectory: bool,
) -> Result<SampleOutput> {
    config.validate()?;
    let (cond, uncond) = prompts.encode()?;
    sample_with_conditions(model, adapters, &cond, &uncond, config, record_trajectory)
}

pub fn sample_with_conditions(
    model: &DenoiserModel,
    adapters: Option<&AdapterSet>,
    cond: &ConditionEmbedding,
    uncond: &ConditionEmbedding,
    config: &SamplerConfig,
    record_trajectory: bool,
) -> Result<SampleOutput> {
    config.validate()?;
    if config.shape.channels != model.config().channels {
        return Err(invalid!(
            "sampler latent has {} channels, model expects {}",
            config.shape.channels,
            model.config().channels
        ));
    }
    let sched = build_noise_schedule(config.steps, ScheduleKind::LinearSignal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = LatentVideo::randn(config.shape, &mut rng);
    let mut trajectory = Vec::new();
    if record_trajectory {
        trajectory.push(z.clone());
    }
    let mut scales = Vec::with_capacity(config.steps);
    let mut lora_scale = config.lambda_s;
    for t in (1..=config.steps).rev() {
        if t == config.steps - config.switch_step {
            lora_scale = config.lambda_l;
        }
        scales.push(StepScale { t, lora_scale });
        let level = t as f64 / config.steps as f64;
        let eps_u = model.predict_noise_at_level(&z, uncond, level, adapters, lora_scale)?;
        let eps_c = model.predict_noise_at_level(&z, cond, level, adapters, lora_scale)?;
        let eps_hat = cfg_combine(&eps_u, &eps_c, config.guidance_scale)?;
        z = ddim_step(&z, &eps_hat, t, &sched)?;
        if !z.is_finite() {
            return Err(Error::NumericDivergence {
                step: config.steps - t + 1,
                detail: format!("latent became non-finite at t={t}"),
            });
        }
        if record_trajectory {
            trajectory.push(z.clone());
        }
    }
    Ok(SampleOutput {
        latent: z,
        scales,
        trajectory,
    })
}
