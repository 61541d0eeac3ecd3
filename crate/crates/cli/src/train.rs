//! `subjectcraft train <config>`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subjectcraft_core::checkpoint::Checkpoint;
use subjectcraft_core::config::ConfigFile;
use subjectcraft_core::image::{synthetic_class_images, synthetic_subject};
use subjectcraft_core::manifest::{FileRecord, RunManifest};
use subjectcraft_core::model::ScheduleConfig;
use subjectcraft_core::text::DEFAULT_MAX_LENGTH;
use subjectcraft_core::train::{regularization_set, still_video_shape, train_with_progress, write_loss_csv};
use subjectcraft_core::{
    DenoiserModel, ModelConfig, PixelAutoencoder, RgbImage, ScheduleKind, ToyTextEncoder, TrainConfig,
};

use crate::error::{usage, CliResult};
use crate::util::{create_dir, env_seed, load_images, ppm_files, Clock};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ADAPTERS_FILE: &str = "adapters.lora";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum SubjectSource {
    Synthetic { size: usize },
    Files { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum RegSource {
    None,
    Synthetic,
    Dir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseModel {
    #[serde(rename = "fresh")]
    Fresh { model: ModelConfig, max_length: usize },
    #[serde(rename = "checkpoint")]
    Checkpoint(PathBuf),
}

/// Everything a training run depends on, after defaults are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub output_dir: PathBuf,
    pub subject_images: SubjectSource,
    pub prompts: Vec<String>,
    pub reg_set: RegSource,
    pub reg_caption: String,
    pub base: BaseModel,
    pub train: TrainConfig,
}

const MODEL_KEYS: [&str; 5] = ["model_seed", "schedule_steps", "width", "cond_dim", "max_length"];

impl TrainRun {
    pub fn from_config(mut c: ConfigFile, seed_override: Option<u64>) -> CliResult<Self> {
        let d = TrainConfig::default();
        let mut train = TrainConfig {
            learning_rate: c.take_or("learning_rate", d.learning_rate)?,
            weight_decay: c.take_or("weight_decay", d.weight_decay)?,
            alpha: c.take_or("alpha", d.alpha)?,
            iterations: c.take_or("iterations", d.iterations)?,
            frames: c.take_or("frames", d.frames)?,
            reg_set_size: c.take_or("reg_set_size", d.reg_set_size)?,
            seed: c.take_or("seed", d.seed)?,
            rank: c.take_or("rank", d.rank)?,
            mode: c.take_or("mode", d.mode)?,
            token: c.take_str("token").unwrap_or(d.token),
            class_word: c.take_str("class_word").unwrap_or(d.class_word),
            beta1: c.take_or("beta1", d.beta1)?,
            beta2: c.take_or("beta2", d.beta2)?,
            adam_eps: c.take_or("adam_eps", d.adam_eps)?,
        };
        if let Some(seed) = seed_override {
            train.seed = seed;
        }
        train.validate()?;

        let output_dir = c.take_path("output_dir").unwrap_or_else(|| c.resolve("run"));
        let image_size: Option<usize> = c.take("image_size")?;
        let subject_images = match c.take_str("subject_images").as_deref() {
            None | Some("synthetic") => SubjectSource::Synthetic {
                size: image_size.unwrap_or(16),
            },
            Some(list) => {
                if image_size.is_some() {
                    return Err(usage!("image_size only applies to synthetic subject_images"));
                }
                let paths: Vec<PathBuf> = list
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| c.resolve(s))
                    .collect();
                if paths.is_empty() {
                    return Err(usage!("subject_images lists no files"));
                }
                SubjectSource::Files { paths }
            }
        };
        let prompts = match c.take_str("prompts") {
            Some(p) => p
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            None => vec![format!("a {} {}", train.token, train.class_word)],
        };
        if prompts.is_empty() {
            return Err(usage!("prompts lists no prompts"));
        }
        let reg_set = match c.take_str("reg_set").as_deref() {
            None | Some("none") => RegSource::None,
            Some("synthetic") => RegSource::Synthetic,
            Some(dir) => RegSource::Dir { path: c.resolve(dir) },
        };
        if train.alpha > 0.0 && reg_set == RegSource::None {
            return Err(usage!(
                "alpha = {} > 0 needs a regularization set: set `reg_set` (synthetic or a directory) or alpha = 0",
                train.alpha
            ));
        }
        let reg_caption = c
            .take_str("reg_caption")
            .unwrap_or_else(|| format!("a {}", train.class_word));

        let base = match c.take_path("base_checkpoint") {
            Some(path) => {
                for key in MODEL_KEYS {
                    if c.take_str(key).is_some() {
                        return Err(usage!("`{key}` cannot be combined with base_checkpoint"));
                    }
                }
                BaseModel::Checkpoint(path)
            }
            None => {
                let d = ModelConfig::default();
                let model = ModelConfig {
                    width: c.take_or("width", d.width)?,
                    cond_dim: c.take_or("cond_dim", d.cond_dim)?,
                    schedule: ScheduleConfig {
                        steps: c.take_or("schedule_steps", d.schedule.steps)?,
                        kind: ScheduleKind::LinearSignal,
                    },
                    seed: c.take_or("model_seed", d.seed)?,
                    ..d
                };
                BaseModel::Fresh {
                    model,
                    max_length: c.take_or("max_length", DEFAULT_MAX_LENGTH)?,
                }
            }
        };
        c.finish()?;
        Ok(Self {
            output_dir,
            subject_images,
            prompts,
            reg_set,
            reg_caption,
            base,
            train,
        })
    }

    fn corpus(&self) -> Vec<String> {
        let token = self.train.token.to_lowercase();
        self.prompts
            .iter()
            .chain(std::iter::once(&self.reg_caption))
            .map(|p| {
                p.split_whitespace()
                    .filter(|w| w.to_lowercase() != token)
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }
}

fn check_sizes(images: &[RgbImage], what: &str, h: usize, w: usize) -> CliResult<()> {
    match images.iter().find(|im| (im.height(), im.width()) != (h, w)) {
        Some(im) => Err(usage!(
            "{what}: all images must be {h}x{w}, found {}x{}",
            im.height(),
            im.width()
        )),
        None => Ok(()),
    }
}

pub fn run(config_path: &Path) -> CliResult<()> {
    let clock = Clock::start();
    let cfg = ConfigFile::load(config_path)?;
    let run = TrainRun::from_config(cfg, env_seed()?)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), FileRecord::of(config_path)?);

    let (model, encoder, autoencoder) = match &run.base {
        BaseModel::Fresh { model, max_length } => {
            let m = DenoiserModel::new(*model)?;
            let corpus = run.corpus();
            let enc = ToyTextEncoder::new(corpus.iter().map(String::as_str), model.cond_dim, *max_length, model.seed)?;
            (m, enc, PixelAutoencoder::standard(model.channels))
        }
        BaseModel::Checkpoint(path) => {
            let ck = Checkpoint::load(path)?;
            inputs.insert("base_checkpoint".to_string(), FileRecord::of(path)?);
            (ck.model, ck.encoder, ck.autoencoder)
        }
    };

    let images = match &run.subject_images {
        SubjectSource::Synthetic { size } => {
            if *size == 0 {
                return Err(usage!("image_size must be positive"));
            }
            vec![synthetic_subject().render(*size, *size)]
        }
        SubjectSource::Files { paths } => {
            for (i, p) in paths.iter().enumerate() {
                inputs.insert(format!("subject_image_{i}"), FileRecord::of(p)?);
            }
            load_images(paths)?
        }
    };
    let (h, w) = (images[0].height(), images[0].width());
    check_sizes(&images, "subject_images", h, w)?;

    let reg_images = match &run.reg_set {
        RegSource::None => Vec::new(),
        RegSource::Synthetic => synthetic_class_images(run.train.reg_set_size, h, w, run.train.seed),
        RegSource::Dir { path } => {
            let mut files = ppm_files(path, "reg_set")?;
            files.truncate(run.train.reg_set_size);
            for (i, p) in files.iter().enumerate() {
                inputs.insert(format!("reg_image_{i}"), FileRecord::of(p)?);
            }
            let imgs = load_images(&files)?;
            check_sizes(&imgs, "reg_set", h, w)?;
            imgs
        }
    };
    let reg = regularization_set(&reg_images, &run.reg_caption, &run.train.token, run.train.frames, &autoencoder)?;

    let iterations = run.train.iterations;
    let outcome = train_with_progress(
        &model,
        encoder,
        &images,
        &run.prompts,
        &reg,
        &autoencoder,
        &run.train,
        |rec| {
            if rec.step == 1 || rec.step % 50 == 0 || rec.step == iterations {
                eprintln!(
                    "step {:>5}/{iterations}  l_video {:.6}  l_pr {:.6}  total {:.6}",
                    rec.step, rec.l_video, rec.l_pr, rec.total
                );
            }
        },
    )?;

    create_dir(&run.output_dir)?;
    let latent_shape = still_video_shape(&images[0], run.train.frames, model.config().channels)?;
    let ck = Checkpoint {
        model,
        encoder: outcome.encoder,
        autoencoder,
        latent_shape,
    };
    let out = |name: &str| run.output_dir.join(name);
    ck.save(out(CHECKPOINT_FILE))?;
    outcome.adapters.save(out(ADAPTERS_FILE))?;
    write_loss_csv(&outcome.history, out(LOSS_FILE))?;

    let mut outputs = BTreeMap::new();
    for name in [CHECKPOINT_FILE, ADAPTERS_FILE, LOSS_FILE] {
        outputs.insert(name.to_string(), FileRecord::of(out(name))?);
    }
    let manifest = RunManifest {
        command: "train".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(&run).expect("config serializes"),
        seed: run.train.seed,
        lora_scales: Vec::new(),
        inputs,
        outputs,
        wall_clock: clock.finish(),
    };
    manifest.save(out(MANIFEST_FILE))?;
    println!("{}", run.output_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<TrainRun> {
        TrainRun::from_config(ConfigFile::parse(text, "/cfg").unwrap(), None)
    }

    #[test]
    fn defaults() {
        let run = parse("reg_set = synthetic\n").unwrap();
        assert_eq!(run.output_dir, PathBuf::from("/cfg/run"));
        assert_eq!(run.prompts, vec!["a V* toy".to_string()]);
        assert_eq!(run.reg_caption, "a toy");
        assert_eq!(run.train, TrainConfig::default());
        assert_eq!(run.subject_images, SubjectSource::Synthetic { size: 16 });
        assert_eq!(run.corpus(), vec!["a toy".to_string(), "a toy".to_string()]);
    }

    #[test]
    fn missing_reg_set_names_the_key() {
        let err = parse("alpha = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("reg_set"));
        assert!(parse("alpha = 0\n").is_ok());
    }

    #[test]
    fn rejects_unknown_and_conflicting_keys() {
        assert!(parse("alpha = 0\nlearnig_rate = 1\n").is_err());
        assert!(parse("alpha = 0\nbase_checkpoint = m.ckpt\nwidth = 8\n").is_err());
        assert!(parse("alpha = 0\nsubject_images = a.ppm\nimage_size = 8\n").is_err());
        assert!(parse("alpha = 0\nmode = both\n").is_err());
    }

    #[test]
    fn seed_override_wins() {
        let run = TrainRun::from_config(ConfigFile::parse("alpha = 0\nseed = 3\n", ".").unwrap(), Some(9)).unwrap();
        assert_eq!(run.train.seed, 9);
    }
}
