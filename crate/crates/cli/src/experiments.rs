//! Fixed desk-scale experiments: the overfit run, the ablation grid and the
//! held-out synthetic benchmark they are scored on.

use vidseg_core::decoder::Aggregation;
use vidseg_core::deformattn::FrameMode;
use vidseg_core::model::{Model, ModelError};
use vidseg_core::tensor::ParamStore;
use vidseg_core::vidgen::{
    generate_dataset, shape_categories, CategoryRecord, Dataset, LabeledVideo, SceneSampler, VidgenError,
};
use vidseg_core::viseval::{evaluate, EvalError, EvalResult};

use crate::config::{InferConfig, RunConfig, SourceConfig};
use crate::data::TrainingData;
use crate::infer::predict_video;
use crate::train::{TrainError, Trainer};

/// Training seeds every ablation variant is run with; AP50 is averaged over them.
pub const ABLATION_SEEDS: [u64; 1] = [0];
/// Iterations of one ablation training run.
pub const ABLATION_ITERATIONS: usize = 1200;
/// Videos the ablation variants train on.
pub const ABLATION_TRAIN_VIDEOS: usize = 64;
const ABLATION_TRAIN_SEED: u64 = 100;
/// Held-out benchmark size and generator seed.
pub const BENCHMARK_VIDEOS: usize = 32;
const BENCHMARK_SEED: u64 = 200;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] VidgenError),
}

/// The overfit run: the desk preset as shipped.
pub fn overfit_config() -> RunConfig {
    RunConfig::desk()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Query decomposition, weighted-sum aggregation, per-frame attention.
    Full,
    DecomposeOff,
    Average,
    Sum,
    Flatten,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::DecomposeOff,
        Variant::Average,
        Variant::Sum,
        Variant::Flatten,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DecomposeOff => "decompose_off",
            Variant::Average => "average",
            Variant::Sum => "sum",
            Variant::Flatten => "flatten",
        }
    }
}

/// Desk configuration of one ablation run.
pub fn ablation_config(variant: Variant, seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.train.iterations = ABLATION_ITERATIONS;
    c.optim.lr_drops = vec![ABLATION_ITERATIONS * 5 / 6];
    c.data.sources = vec![SourceConfig::Synthetic {
        weight: 1.0,
        videos: ABLATION_TRAIN_VIDEOS,
        seed: ABLATION_TRAIN_SEED,
        sampler: SceneSampler::default(),
    }];
    match variant {
        Variant::Full => {}
        Variant::DecomposeOff => c.model.decompose = false,
        Variant::Average => c.model.aggregation = Aggregation::Average,
        Variant::Sum => c.model.aggregation = Aggregation::Sum,
        Variant::Flatten => c.model.frame_mode = FrameMode::Flatten,
    }
    c
}

/// Held-out synthetic videos of `frames` frames, disjoint in seed from every
/// training set.
pub fn benchmark(frames: usize) -> Result<(Vec<LabeledVideo>, Vec<CategoryRecord>), VidgenError> {
    let sampler = SceneSampler {
        frames,
        ..SceneSampler::default()
    };
    Ok((
        generate_dataset(&sampler, BENCHMARK_VIDEOS, BENCHMARK_SEED)?,
        shape_categories(),
    ))
}

/// Trains `config` on its own data sources.
pub fn train(config: RunConfig) -> Result<Trainer, ExperimentError> {
    let multiple = config.model.backbone.size_multiple();
    let data = TrainingData::load(&config.data.sources, config.train.max_size, multiple).map_err(TrainError::from)?;
    let mut trainer = Trainer::new(config, data)?;
    trainer.run(|_| {}, |_| Ok(()))?;
    Ok(trainer)
}

/// Scores a model on `videos`.
pub fn score(
    model: &Model,
    store: &ParamStore,
    videos: &[LabeledVideo],
    categories: &[CategoryRecord],
    infer: &InferConfig,
) -> Result<EvalResult, ExperimentError> {
    let ds = Dataset::from_videos(videos, categories.to_vec())?;
    let mut preds = Vec::new();
    for v in videos {
        preds.extend(predict_video(model, store, v.id, &v.clip, infer, categories)?);
    }
    Ok(evaluate(&preds, &ds)?)
}

/// Mean benchmark AP50 of `variant` over [`ABLATION_SEEDS`].
pub fn ablation_ap50(
    variant: Variant,
    benchmark: &[LabeledVideo],
    categories: &[CategoryRecord],
) -> Result<f64, ExperimentError> {
    let mut total = 0.0;
    for seed in ABLATION_SEEDS {
        let t = train(ablation_config(variant, seed))?;
        total += score(&t.model, &t.store, benchmark, categories, &t.config.infer)?.ap50;
    }
    Ok(total / ABLATION_SEEDS.len() as f64)
}
