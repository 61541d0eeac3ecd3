//! `subjectcraft inspect <file>`: header only, payload never read.

use std::path::Path;

use subjectcraft_core::checkpoint::ModelMeta;
use subjectcraft_core::container::{read_header, ContainerKind, Header};
use subjectcraft_core::Error;

use crate::error::CliResult;

pub fn run(path: &Path, json: bool) -> CliResult<()> {
    let header = read_header(path)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&header).expect("header serializes"));
        return Ok(());
    }
    print!("{}", render(&header)?);
    Ok(())
}

pub fn render(h: &Header) -> CliResult<String> {
    use std::fmt::Write;
    let mut s = String::new();
    let kind = match h.kind {
        ContainerKind::Model => "model",
        ContainerKind::Adapters => "adapters",
    };
    writeln!(s, "format_version: {}", h.format_version).unwrap();
    writeln!(s, "kind: {kind}").unwrap();
    writeln!(s, "payload_bytes: {}", h.payload_bytes).unwrap();
    match h.kind {
        ContainerKind::Adapters => {
            let m = &h.metadata;
            writeln!(s, "mode: {}", m["mode"].as_str().unwrap_or("?")).unwrap();
            writeln!(s, "rank: {}", m["rank"]).unwrap();
            writeln!(s, "lora_scale: {}", m["lora_scale"]).unwrap();
            let targets = m["targets"].as_array().cloned().unwrap_or_default();
            writeln!(s, "targets: {}", targets.len()).unwrap();
            for t in targets {
                writeln!(
                    s,
                    "  {}  A {}  B {}",
                    t["target_id"].as_str().unwrap_or("?"),
                    t["a_shape"],
                    t["b_shape"]
                )
                .unwrap();
            }
        }
        ContainerKind::Model => {
            let meta: ModelMeta = serde_json::from_value(h.metadata.clone())
                .map_err(|e| Error::Format(format!("model metadata: {e}")))?;
            writeln!(s, "schedule: T={} ({:?})", meta.model.schedule.steps, meta.model.schedule.kind).unwrap();
            writeln!(s, "latent_shape: {}", meta.latent_shape).unwrap();
            writeln!(
                s,
                "model: width={} cond_dim={} spatial_blocks={} channels={}",
                meta.model.width, meta.model.cond_dim, meta.model.spatial_blocks, meta.model.channels
            )
            .unwrap();
            let learned: Vec<&str> = meta
                .text
                .learned_token_ids
                .iter()
                .filter_map(|&i| meta.text.vocabulary.get(i).map(String::as_str))
                .collect();
            writeln!(
                s,
                "text: vocab={} max_length={} learned=[{}]",
                meta.text.vocabulary.len(),
                meta.text.max_length,
                learned.join(", ")
            )
            .unwrap();
            writeln!(s, "tensors: {}", h.tensors.len()).unwrap();
            for t in &h.tensors {
                writeln!(s, "  {} {:?}", t.name, t.shape).unwrap();
            }
        }
    }
    Ok(s)
}
