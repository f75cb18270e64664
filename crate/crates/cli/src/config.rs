//! Run configuration stored as TOML and embedded in checkpoints.
//!
//! Only paths may be overridden from the environment:
//! `VIDSEG_OUTPUT_DIR` replaces `train.output_dir` and `VIDSEG_DATA_ROOT`
//! is prepended to relative data-source paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vidseg_core::decoder::Aggregation;
use vidseg_core::deformattn::FrameMode;
use vidseg_core::encoder::BackboneConfig;
use vidseg_core::heads::PostprocessConfig;
use vidseg_core::matchloss::LossWeights;
use vidseg_core::model::ModelConfig;
use vidseg_core::tensor::AdamWConfig;
use vidseg_core::vidgen::SceneSampler;

pub const ENV_OUTPUT_DIR: &str = "VIDSEG_OUTPUT_DIR";
pub const ENV_DATA_ROOT: &str = "VIDSEG_DATA_ROOT";

/// Upper bound on objects per synthetic scene.
pub const MAX_SCENE_OBJECTS: usize = 16;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub backbone_lr_factor: f64,
    pub sampling_lr_factor: f64,
    /// Global gradient-norm clip; absent disables clipping.
    pub clip_norm: Option<f64>,
    /// Iterations after which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            backbone_lr_factor: a.backbone_lr_factor,
            sampling_lr_factor: a.sampling_lr_factor,
            clip_norm: a.clip_norm,
            lr_drops: Vec::new(),
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            backbone_lr_factor: self.backbone_lr_factor,
            sampling_lr_factor: self.sampling_lr_factor,
            clip_norm: self.clip_norm,
        }
    }

    /// Base learning rate for the 0-based iteration `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| step >= d).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Frames per training clip.
    pub clip_frames: usize,
    /// Longest side of training frames; larger videos are downscaled.
    pub max_size: Option<usize>,
    pub log_every: usize,
    /// Checkpoint period in iterations; 0 saves only the final checkpoint.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            clip_frames: 5,
            max_size: None,
            log_every: 50,
            checkpoint_every: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// One training data source with its sampling weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Moving-shape videos rendered in memory.
    Synthetic {
        #[serde(default = "one")]
        weight: f64,
        videos: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        sampler: SceneSampler,
    },
    /// A directory holding `annotations.json` and the frames it references.
    Annotations {
        #[serde(default = "one")]
        weight: f64,
        path: PathBuf,
    },
    /// Still images in the annotation format, expanded into rotated pseudo videos.
    Pseudo {
        #[serde(default = "one")]
        weight: f64,
        path: PathBuf,
        #[serde(default = "ten")]
        max_rotation: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn ten() -> f64 {
    10.0
}

impl SourceConfig {
    pub fn weight(&self) -> f64 {
        match self {
            SourceConfig::Synthetic { weight, .. }
            | SourceConfig::Annotations { weight, .. }
            | SourceConfig::Pseudo { weight, .. } => *weight,
        }
    }

    fn path_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            SourceConfig::Synthetic { .. } => None,
            SourceConfig::Annotations { path, .. } | SourceConfig::Pseudo { path, .. } => Some(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sources: Vec<SourceConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sources: vec![SourceConfig::Synthetic {
                weight: 1.0,
                videos: 20,
                seed: 0,
                sampler: SceneSampler::default(),
            }],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Build instance embeddings from this many evenly spaced frames.
    pub subsample: Option<usize>,
    /// Longest side of inference frames; larger videos are downscaled.
    pub max_size: Option<usize>,
    pub postprocess: PostprocessConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale schedule used by the shipped experiments.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig {
                lr: 1e-3,
                clip_norm: Some(1.0),
                lr_drops: vec![1500],
                ..Default::default()
            },
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            infer: InferConfig::default(),
        }
    }

    /// Smallest useful configuration: C=32, 2+2 layers, N=10, T=3.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.model.dim = 32;
        c.model.encoder_layers = 2;
        c.model.decoder_layers = 2;
        c.model.queries = 10;
        c.train.clip_frames = 3;
        c.train.iterations = 50;
        c.optim.lr_drops = vec![40];
        c.data.sources = vec![SourceConfig::Synthetic {
            weight: 1.0,
            videos: 4,
            seed: 0,
            sampler: SceneSampler {
                width: 64,
                height: 64,
                frames: 5,
                ..Default::default()
            },
        }];
        c
    }

    /// Full-size settings: C=256, 6+6 layers, 300 queries, base LR 2e-4 with
    /// drops after 6 and 10 of 12 epochs, longest training side 768 and
    /// inference side 640 (360p at 16:9).
    pub fn full(iterations_per_epoch: usize) -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig {
            num_classes: 40,
            dim: 256,
            heads: 8,
            points: 4,
            ffn_dim: 1024,
            encoder_layers: 6,
            decoder_layers: 6,
            queries: 300,
            mask_branch_width: 128,
            backbone: BackboneConfig {
                stage_widths: vec![64, 128, 256, 512, 1024, 2048],
                feature_strides: vec![8, 16, 32, 64],
            },
            aggregation: Aggregation::WeightedSum,
            decompose: true,
            frame_mode: FrameMode::PerFrame,
            detach_refs: true,
        };
        c.optim = OptimConfig {
            clip_norm: Some(0.1),
            lr_drops: vec![6 * iterations_per_epoch, 10 * iterations_per_epoch],
            ..Default::default()
        };
        c.train.iterations = 12 * iterations_per_epoch;
        c.train.max_size = Some(768);
        c.infer.max_size = Some(640);
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            "full" => Some(Self::full(1000)),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, applies environment path overrides, and validates. Relative
    /// data paths are resolved against the config file's directory unless
    /// `VIDSEG_DATA_ROOT` is set.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c: RunConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.apply_env(base, |k| std::env::var_os(k).map(PathBuf::from));
        c.validate()?;
        Ok(c)
    }

    /// Path overrides from `env`; nothing else is read from the environment.
    pub fn apply_env(&mut self, config_dir: &Path, env: impl Fn(&str) -> Option<PathBuf>) {
        if let Some(out) = env(ENV_OUTPUT_DIR) {
            self.train.output_dir = out;
        }
        let root = env(ENV_DATA_ROOT).unwrap_or_else(|| config_dir.to_path_buf());
        for s in &mut self.data.sources {
            if let Some(p) = s.path_mut() {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.clip_frames == 0 {
            return bad("train.clip_frames must be positive".into());
        }
        if self
            .train
            .max_size
            .is_some_and(|s| s < self.model.backbone.size_multiple())
        {
            return bad(format!(
                "train.max_size must be at least {}",
                self.model.backbone.size_multiple()
            ));
        }
        if self.infer.subsample == Some(0) {
            return bad("infer.subsample must be positive".into());
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return bad("optim.lr must be positive".into());
        }
        if self.optim.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("optim.clip_norm must be positive".into());
        }
        if self.data.sources.is_empty() {
            return bad("data.sources must not be empty".into());
        }
        for (i, s) in self.data.sources.iter().enumerate() {
            if !(s.weight() > 0.0 && s.weight().is_finite()) {
                return bad(format!("data.sources[{i}].weight must be positive"));
            }
            if let SourceConfig::Synthetic { videos, sampler, .. } = s {
                if *videos == 0 {
                    return bad(format!("data.sources[{i}].videos must be positive"));
                }
                if sampler.min_objects > sampler.max_objects
                    || sampler.min_size <= 0.0
                    || sampler.min_size > sampler.max_size
                {
                    return bad(format!("data.sources[{i}].sampler has inconsistent ranges"));
                }
                if sampler.max_objects > MAX_SCENE_OBJECTS {
                    return bad(format!(
                        "data.sources[{i}].sampler.max_objects exceeds {}",
                        MAX_SCENE_OBJECTS
                    ));
                }
            }
        }
        Ok(())
    }
}
