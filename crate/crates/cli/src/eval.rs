//! `subjectcraft eval ...`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subjectcraft_core::eval::{evaluate, toy_embedder, MetricReport};
use subjectcraft_core::manifest::{FileRecord, RunManifest};

use crate::error::{usage, CliResult};
use crate::util::{create_dir, load_images, ppm_files, Clock};

/// `toy` or `toy:<seed>`. The DINO role uses the next seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub seed: u64,
}

impl std::str::FromStr for EmbedderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "toy" => Ok(Self { seed: 0 }),
            Some(("toy", seed)) => seed
                .parse()
                .map(|seed| Self { seed })
                .map_err(|_| format!("bad toy embedder seed `{seed}`")),
            _ => Err(format!("unknown embedder `{s}` (expected toy or toy:<seed>)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub frames_dir: PathBuf,
    pub targets_dir: PathBuf,
    pub prompt: String,
    pub embedder: EmbedderSpec,
}

pub fn run(req: EvalRequest, out: Option<&Path>, csv: bool) -> CliResult<()> {
    let clock = Clock::start();
    let frame_files = ppm_files(&req.frames_dir, "frames-dir")?;
    let target_files = ppm_files(&req.targets_dir, "targets-dir")?;
    let frames = load_images(&frame_files)?;
    let targets = load_images(&target_files)?;
    let clip = toy_embedder(req.embedder.seed);
    let dino = toy_embedder(req.embedder.seed.wrapping_add(1));
    let report = evaluate(&frames, &targets, &req.prompt, &clip, &dino)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if csv {
        println!("{}", MetricReport::CSV_HEADER);
        println!("{}", report.csv_row());
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let metrics = dir.join("metrics.json");
        std::fs::write(&metrics, format!("{json}\n")).map_err(|e| usage!("{}: {e}", metrics.display()))?;
        let mut inputs = BTreeMap::new();
        for (role, files) in [("frame", &frame_files), ("target", &target_files)] {
            for (i, p) in files.iter().enumerate() {
                inputs.insert(format!("{role}_{i:04}"), FileRecord::of(p)?);
            }
        }
        let mut outputs = BTreeMap::new();
        outputs.insert("metrics.json".to_string(), FileRecord::of(&metrics)?);
        RunManifest {
            command: "eval".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(&req).expect("request serializes"),
            seed: req.embedder.seed,
            lora_scales: Vec::new(),
            inputs,
            outputs,
            wall_clock: clock.finish(),
        }
        .save(dir.join("manifest.json"))?;
    }
    Ok(())
}
