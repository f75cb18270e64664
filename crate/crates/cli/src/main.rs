use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vidseg_cli::commands;
use vidseg_cli::config::RunConfig;
use vidseg_core::vidgen::SceneSampler;

#[derive(Parser)]
#[command(
    name = "vidseg",
    version,
    about = "Video instance segmentation: train, infer, evaluate, diagnose"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict instance tracks for every video of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding annotations.json, or the JSON file itself.
        #[arg(long)]
        input: PathBuf,
        /// Run the decoder on k evenly spaced frames and propagate masks to all frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Prediction file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory or annotation JSON.
        #[arg(long)]
        gt: PathBuf,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export sampling points and frame weights of one video.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: u64,
        /// Dataset holding the video; defaults to the checkpoint's training sources.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory; defaults to diagnostics/video_<id>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of top-scoring queries drawn in the images.
        #[arg(long, default_value_t = 3)]
        queries: usize,
    },
    /// Render a synthetic dataset to disk.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        videos: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per video.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Print a configuration preset (desk, tiny, full) as TOML.
    Config {
        #[arg(default_value = "desk")]
        preset: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, resume } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let start = Instant::now();
            let every = cfg.train.log_every.max(1);
            let last = commands::train(cfg, resume.as_deref(), |e| {
                if e.step % every == 0 {
                    log::info!(
                        "step {} loss {:.4} (class {:.3} l1 {:.3} giou {:.3} focal {:.3} dice {:.3}) grad {:.3} lr {:.2e} {:.0}s",
                        e.step,
                        e.loss.total,
                        e.loss.class,
                        e.loss.l1,
                        e.loss.giou,
                        e.loss.focal,
                        e.loss.dice,
                        e.grad_norm,
                        e.lr,
                        start.elapsed().as_secs_f64()
                    );
                }
            })?;
            println!("{}", last.display());
        }
        Command::Infer {
            checkpoint,
            input,
            frames,
            out,
        } => {
            if frames == Some(0) {
                bail!("--frames must be positive");
            }
            let preds = commands::infer(&checkpoint, &input, frames)?;
            match out {
                Some(path) => {
                    commands::write_json(&path, &preds)?;
                    log::info!("wrote {} predictions to {}", preds.len(), path.display());
                }
                None => println!("{}", serde_json::to_string(&preds)?),
            }
        }
        Command::Eval { pred, gt, out } => {
            let result = commands::eval(&pred, &gt)?;
            print!("{}", result.table());
            if let Some(path) = out {
                commands::write_json(&path, &result)?;
            }
        }
        Command::Diagnose {
            checkpoint,
            video,
            input,
            out,
            queries,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from(format!("diagnostics/video_{video}")));
            for p in commands::diagnose(&checkpoint, video, input.as_deref(), &out, queries)? {
                println!("{}", p.display());
            }
        }
        Command::Generate {
            out,
            videos,
            seed,
            frames,
        } => {
            let mut sampler = SceneSampler::default();
            if let Some(t) = frames {
                sampler.frames = t;
            }
            println!("{}", commands::generate(&out, &sampler, videos, seed)?.display());
        }
        Command::Config { preset } => {
            let cfg = RunConfig::preset(&preset)
                .with_context(|| format!("unknown preset {preset:?}; expected desk, tiny or full"))?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
