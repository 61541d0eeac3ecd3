use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod error;
mod eval;
mod inspect;
mod sample;
mod train;
mod util;

use error::CliResult;

#[derive(Parser)]
#[command(name = "subjectcraft", version, about = "Subject-customized latent video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn adapters and a pseudo-token from a `key = value` config file.
    Train { config: PathBuf },
    /// Generate frames with the dynamic adapter-strength schedule.
    Sample(SampleArgs),
    /// Score generated frames against target images.
    Eval(EvalArgs),
    /// Print a checkpoint or adapter file header.
    Inspect {
        path: PathBuf,
        /// Dump the raw header as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct SampleArgs {
    /// Output directory for frames and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Re-run exactly what a previous sample manifest recorded.
    #[arg(long, value_name = "MANIFEST", conflicts_with_all = [
        "checkpoint", "adapters", "prompt", "uncond_prompt", "seed", "steps", "switch_step",
        "lambda_s", "lambda_l", "cfg", "frames", "height", "width",
    ])]
    replay: Option<PathBuf>,
    #[arg(long, required_unless_present = "replay")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long, required_unless_present = "replay")]
    prompt: Option<String>,
    /// Negative prompt; empty means the all-padding condition.
    #[arg(long)]
    uncond_prompt: Option<String>,
    /// Defaults to $SUBJECTCRAFT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Denoising steps.
    #[arg(long = "T", id = "steps", default_value_t = 50)]
    steps: usize,
    /// Steps run at lambda-s before switching to lambda-l.
    #[arg(long = "K", id = "switch_step", default_value_t = 5)]
    switch_step: usize,
    #[arg(long, default_value_t = 0.4)]
    lambda_s: f64,
    #[arg(long, default_value_t = 0.8)]
    lambda_l: f64,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 12.0)]
    cfg: f64,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    frames_dir: PathBuf,
    #[arg(long)]
    targets_dir: PathBuf,
    #[arg(long)]
    prompt: String,
    /// `toy` or `toy:<seed>`.
    #[arg(long, default_value = "toy")]
    embedder: eval::EmbedderSpec,
    /// Also print a CSV header and row.
    #[arg(long)]
    csv: bool,
    /// Write metrics.json and manifest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sample(args: SampleArgs) -> CliResult<()> {
    if let Some(manifest) = &args.replay {
        return sample::replay(manifest, &args.out);
    }
    let seed = match args.seed {
        Some(s) => s,
        None => util::env_seed()?.unwrap_or(0),
    };
    let flags = sample::SampleFlags {
        checkpoint: args.checkpoint.expect("required by clap"),
        adapters: args.adapters,
        prompt: args.prompt.expect("required by clap"),
        uncond_prompt: args.uncond_prompt,
        seed,
        steps: args.steps,
        switch_step: args.switch_step,
        lambda_s: args.lambda_s,
        lambda_l: args.lambda_l,
        guidance_scale: args.cfg,
        frames: args.frames,
        height: args.height,
        width: args.width,
    };
    sample::run(flags, &args.out)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => train::run(&config),
        Command::Sample(args) => sample(args),
        Command::Eval(a) => eval::run(
            eval::EvalRequest {
                frames_dir: a.frames_dir,
                targets_dir: a.targets_dir,
                prompt: a.prompt,
                embedder: a.embedder,
            },
            a.out.as_deref(),
            a.csv,
        ),
        Command::Inspect { path, json } => inspect::run(&path, json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
