//! `subjectcraft sample ...`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subjectcraft_core::autoencoder::decode_video;
use subjectcraft_core::checkpoint::Checkpoint;
use subjectcraft_core::lora::load_adapters;
use subjectcraft_core::manifest::{FileRecord, RunManifest};
use subjectcraft_core::sampler::Prompts;
use subjectcraft_core::{sample_video, LatentShape, SamplerConfig};

use crate::error::{usage, CliResult};
use crate::util::{create_dir, Clock};

pub const MANIFEST_FILE: &str = "manifest.json";

/// The recorded, replayable part of a sample run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub checkpoint: PathBuf,
    pub adapters: Option<PathBuf>,
    pub prompt: String,
    pub uncond_prompt: Option<String>,
    pub sampler: SamplerConfig,
}

/// Sampler settings as given on the command line; shape fields fall back to
/// the checkpoint's training shape.
#[derive(Debug, Clone)]
pub struct SampleFlags {
    pub checkpoint: PathBuf,
    pub adapters: Option<PathBuf>,
    pub prompt: String,
    pub uncond_prompt: Option<String>,
    pub seed: u64,
    pub steps: usize,
    pub switch_step: usize,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub guidance_scale: f64,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

pub fn run(flags: SampleFlags, out: &Path) -> CliResult<()> {
    let clock = Clock::start();
    // Check the schedule before touching any file so flag errors surface first.
    let mut sampler = SamplerConfig {
        steps: flags.steps,
        guidance_scale: flags.guidance_scale,
        lambda_s: flags.lambda_s,
        lambda_l: flags.lambda_l,
        switch_step: flags.switch_step,
        seed: flags.seed,
        ..SamplerConfig::default()
    };
    sampler.validate()?;
    let ck = Checkpoint::load(&flags.checkpoint)?;
    let trained = ck.latent_shape;
    sampler.shape = LatentShape::new(
        flags.frames.unwrap_or(trained.frames),
        flags.height.unwrap_or(trained.height),
        flags.width.unwrap_or(trained.width),
        ck.model.config().channels,
    )?;
    let request = SampleRequest {
        checkpoint: canonical(&flags.checkpoint)?,
        adapters: flags.adapters.as_deref().map(canonical).transpose()?,
        prompt: flags.prompt,
        uncond_prompt: flags.uncond_prompt,
        sampler,
    };
    execute(&request, Some(ck), out, clock)
}

pub fn replay(manifest_path: &Path, out: &Path) -> CliResult<()> {
    let clock = Clock::start();
    let manifest = RunManifest::load(manifest_path)?;
    if manifest.command != "sample" {
        return Err(usage!(
            "{} records a `{}` run, not `sample`",
            manifest_path.display(),
            manifest.command
        ));
    }
    for rec in manifest.inputs.values() {
        rec.verify()?;
    }
    let request: SampleRequest = serde_json::from_value(manifest.config)
        .map_err(|e| usage!("{}: bad sample config: {e}", manifest_path.display()))?;
    execute(&request, None, out, clock)
}

fn canonical(p: &Path) -> CliResult<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| usage!("{}: {e}", p.display()))
}

fn execute(req: &SampleRequest, ck: Option<Checkpoint>, out: &Path, clock: Clock) -> CliResult<()> {
    let ck = match ck {
        Some(ck) => ck,
        None => Checkpoint::load(&req.checkpoint)?,
    };
    let adapters = req
        .adapters
        .as_ref()
        .map(|p| load_adapters(p, &ck.model))
        .transpose()?;
    let prompts = Prompts {
        encoder: &ck.encoder,
        prompt: &req.prompt,
        uncond_prompt: req.uncond_prompt.as_deref(),
    };
    let result = sample_video(&ck.model, adapters.as_ref(), &prompts, &req.sampler, false)?;
    let frames = decode_video(&ck.autoencoder, &result.latent)?;

    create_dir(out)?;
    let mut outputs = BTreeMap::new();
    for (i, frame) in frames.iter().enumerate() {
        let name = frame_name(i);
        let path = out.join(&name);
        frame.save_ppm(&path)?;
        outputs.insert(name, FileRecord::of(&path)?);
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), FileRecord::of(&req.checkpoint)?);
    if let Some(p) = &req.adapters {
        inputs.insert("adapters".to_string(), FileRecord::of(p)?);
    }
    let manifest = RunManifest {
        command: "sample".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(req).expect("request serializes"),
        seed: req.sampler.seed,
        lora_scales: result.scales,
        inputs,
        outputs,
        wall_clock: clock.finish(),
    };
    manifest.save(out.join(MANIFEST_FILE))?;
    println!("{}", out.display());
    Ok(())
}
