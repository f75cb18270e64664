//! Subcommand implementations shared by the binary and the tests.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vidseg_core::heads::Prediction;
use vidseg_core::model::ModelError;
use vidseg_core::vidgen::{
    generate_dataset, load_annotations, shape_categories, write_dataset, LabeledVideo, SceneSampler, VidgenError,
};
use vidseg_core::viseval::{evaluate, parse_predictions, EvalError, EvalResult};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{dataset_paths, load_videos, DataError, TrainingData};
use crate::diagnose::{diagnose_clip, write_diagnostics, DiagnoseError};
use crate::infer::predict_video;
use crate::train::{StepLog, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] VidgenError),
    #[error(transparent)]
    Diagnose(#[from] DiagnoseError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("video {0} is not in the input data")]
    UnknownVideo(u64),
    #[error("checkpoint was trained for {config} classes but lists {categories} categories")]
    Categories { config: usize, categories: usize },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CommandError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::write(path, text).map_err(io(path))
}

/// Trains from `config`, optionally resuming from a checkpoint. Writes
/// `config.toml`, `train_log.jsonl`, periodic `step_XXXXXX.json` checkpoints
/// and `last.json` under `train.output_dir`. Returns the final checkpoint path.
pub fn train(
    config: RunConfig,
    resume: Option<&Path>,
    mut on_log: impl FnMut(&StepLog),
) -> Result<PathBuf, CommandError> {
    let multiple = config.model.backbone.size_multiple();
    let data = TrainingData::load(&config.data.sources, config.train.max_size, multiple)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            // iteration budget and output location may change between runs
            ckpt.config.train.iterations = config.train.iterations;
            ckpt.config.train.output_dir = config.train.output_dir.clone();
            Trainer::resume(ckpt, data)?
        }
        None => Trainer::new(config, data)?,
    };
    let out = trainer.config.train.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(io(&out))?;
    write_file(&out.join("config.toml"), &trainer.config.to_toml())?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io(&log_path))?;
    let mut log_err = None;
    let every = trainer.config.train.log_every.max(1);
    let last_step = trainer.config.train.iterations.saturating_sub(1);
    trainer.run(
        |entry| {
            if entry.step % every == 0 || entry.step == last_step {
                if let Err(e) = writeln!(log, "{}", serde_json::to_string(entry).expect("log entry serializes")) {
                    log_err.get_or_insert(e);
                }
            }
            on_log(entry);
        },
        |t| Ok(t.checkpoint().save(&out.join(format!("step_{:06}.json", t.step)))?),
    )?;
    if let Some(e) = log_err {
        return Err(io(&log_path)(e));
    }
    let last = out.join("last.json");
    trainer.checkpoint().save(&last)?;
    Ok(last)
}

/// Predictions for every video of `<dir|json>` input.
pub fn infer(checkpoint: &Path, input: &Path, frames: Option<usize>) -> Result<Vec<Prediction>, CommandError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.categories.len() > ckpt.config.model.num_classes {
        return Err(CommandError::Categories {
            config: ckpt.config.model.num_classes,
            categories: ckpt.categories.len(),
        });
    }
    let (model, store) = ckpt.model()?;
    let mut cfg = ckpt.config.infer.clone();
    if frames.is_some() {
        cfg.subsample = frames;
    }
    let (_, videos) = load_videos(input)?;
    let mut out = Vec::new();
    for v in &videos {
        out.extend(predict_video(&model, &store, v.id, &v.clip, &cfg, &ckpt.categories)?);
    }
    Ok(out)
}

/// Evaluates a prediction file against a `<dir|json>` annotation input.
pub fn eval(pred: &Path, gt: &Path) -> Result<EvalResult, CommandError> {
    let text = std::fs::read_to_string(pred).map_err(io(pred))?;
    let preds = parse_predictions(&text)?;
    let (file, _) = dataset_paths(gt);
    let ds = load_annotations(&file)?;
    Ok(evaluate(&preds, &ds)?)
}

/// Finds a video in `input`, or in the checkpoint's own data sources when no
/// input is given.
fn find_video(ckpt: &Checkpoint, video: u64, input: Option<&Path>) -> Result<LabeledVideo, CommandError> {
    let videos: Vec<LabeledVideo> = match input {
        Some(p) => load_videos(p)?.1,
        None => TrainingData::load(&ckpt.config.data.sources, None, 1)?
            .videos()
            .cloned()
            .collect(),
    };
    videos
        .into_iter()
        .find(|v| v.id == video)
        .ok_or(CommandError::UnknownVideo(video))
}

/// Writes attention diagnostics of one video to `out`.
pub fn diagnose(
    checkpoint: &Path,
    video: u64,
    input: Option<&Path>,
    out: &Path,
    highlight: usize,
) -> Result<Vec<PathBuf>, CommandError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, store) = ckpt.model()?;
    let v = find_video(&ckpt, video, input)?;
    let (export, clip) = diagnose_clip(&model, &store, video, &v.clip, ckpt.config.infer.max_size, highlight)?;
    Ok(write_diagnostics(out, &export, &clip)?)
}

/// Renders a synthetic dataset to `out`.
pub fn generate(out: &Path, sampler: &SceneSampler, videos: usize, seed: u64) -> Result<PathBuf, CommandError> {
    let vs = generate_dataset(sampler, videos, seed)?;
    write_dataset(out, &vs, shape_categories())?;
    Ok(out.join("annotations.json"))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    write_file(path, &serde_json::to_string(value).expect("value serializes"))
}
