//! The full video instance segmentation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{Aggregation, Decoder, DecoderConfig, LayerOutput};
use crate::deformattn::FrameMode;
use crate::encoder::{BackboneConfig, EncodedVideo, Encoder, EncoderConfig, EncoderError};
use crate::geometry::Box;
use crate::heads::{dynamic_masks, BoxHead, ClassHead, Controller, MaskBranch, PredictionSet, MASK_STRIDE};
use crate::maskops::Mask;
use crate::tensor::{Array, ParamStore, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("frame subsample count must be positive")]
    ZeroSubsample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub heads: usize,
    /// Sampling points per level.
    pub points: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub mask_branch_width: usize,
    pub backbone: BackboneConfig,
    pub aggregation: Aggregation,
    pub decompose: bool,
    pub frame_mode: FrameMode,
    pub detach_refs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dim: 32,
            heads: 4,
            points: 4,
            ffn_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            queries: 10,
            mask_branch_width: 16,
            backbone: BackboneConfig::default(),
            aggregation: Aggregation::WeightedSum,
            decompose: true,
            frame_mode: FrameMode::PerFrame,
            detach_refs: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.num_classes == 0 {
            return err("at least one class is required".into());
        }
        for (name, v) in [
            ("dim", self.dim),
            ("heads", self.heads),
            ("points", self.points),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
            ("queries", self.queries),
            ("mask_branch_width", self.mask_branch_width),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return err(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(4) {
            return err(format!(
                "dim {} must be divisible by 4 for the positional encoding",
                self.dim
            ));
        }
        self.backbone.validate().map_err(ModelError::Config)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.encoder_layers,
            dim: self.dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            points: self.points,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            num_layers: self.decoder_layers,
            queries: self.queries,
            dim: self.dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            points: self.points,
            aggregation: self.aggregation,
            decompose: self.decompose,
            detach_refs: self.detach_refs,
        }
    }
}

/// Head outputs of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerPrediction<'t> {
    /// `[N, K + 1]`
    pub class_logits: Var<'t>,
    /// `[T, N, 4]` center form.
    pub boxes: Var<'t>,
    /// `[N, T, H/8, W/8]`
    pub mask_logits: Var<'t>,
}

impl LayerPrediction<'_> {
    /// Plain copy of the layer output.
    pub fn to_prediction_set(&self) -> PredictionSet {
        let probs = self.class_logits.softmax().value();
        let k1 = probs.dim(1);
        let boxes = self.boxes.value();
        let (t, n) = (boxes.dim(0), boxes.dim(1));
        let masks = self.mask_logits.value();
        let (h, w) = (masks.dim(2), masks.dim(3));
        PredictionSet {
            class_probs: probs.data().chunks(k1).map(|r| r.to_vec()).collect(),
            boxes: (0..t)
                .map(|ti| {
                    (0..n)
                        .map(|ni| {
                            let b = &boxes.data()[(ti * n + ni) * 4..][..4];
                            Box::new(b[0], b[1], b[2], b[3])
                        })
                        .collect()
                })
                .collect(),
            mask_logits: (0..n)
                .map(|ni| {
                    (0..t)
                        .map(|ti| Mask::from_vec(h, w, masks.data()[(ni * t + ti) * h * w..][..h * w].to_vec()))
                        .collect()
                })
                .collect(),
        }
    }
}

pub struct ModelOutput<'t> {
    pub layers: Vec<LayerPrediction<'t>>,
    pub decoder: Vec<LayerOutput<'t>>,
    pub encoded: EncodedVideo<'t>,
    /// `[T, 8, H/8, W/8]`
    pub mask_features: Var<'t>,
}

pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub class_head: ClassHead,
    pub box_head: BoxHead,
    pub controller: Controller,
    pub mask_branch: MaskBranch,
}

/// Maps `[0, 1]` pixels to roughly zero-mean unit-range inputs.
pub fn normalize_frames(frames: &Array) -> Array {
    frames.map(|v| (v - 0.5) * 4.0)
}

impl Model {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.backbone.clone(), config.encoder_config(), &mut rng);
        let levels = encoder.num_levels();
        let decoder = Decoder::new(&mut store, config.decoder_config(), levels, &mut rng);
        let class_head = ClassHead::new(&mut store, config.dim, config.num_classes, &mut rng);
        let box_head = BoxHead::new(&mut store, config.dim, &mut rng);
        let controller = Controller::new(&mut store, config.dim, &mut rng);
        let mask_branch = MaskBranch::new(&mut store, config.dim, config.mask_branch_width, levels, &mut rng);
        let model = Self {
            config,
            encoder,
            decoder,
            class_head,
            box_head,
            controller,
            mask_branch,
        };
        Ok((model, store))
    }

    /// Heads applied to one decoder layer's state.
    pub fn heads<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        state: &LayerOutput<'t>,
        mask_features: Var<'t>,
    ) -> LayerPrediction<'t> {
        let omega = self.controller.forward(tape, store, state.instances);
        let centers = state.boxes.narrow(2, 0, 2);
        LayerPrediction {
            class_logits: self.class_head.forward(tape, store, state.instances),
            boxes: state.boxes,
            mask_logits: dynamic_masks(tape, mask_features, omega, centers),
        }
    }

    /// Full forward pass over normalized frames `[T, 3, H, W]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        frames: Var<'t>,
    ) -> Result<ModelOutput<'t>, ModelError> {
        let encoded = self.encoder.forward(tape, store, frames, self.config.frame_mode)?;
        let decoder = self
            .decoder
            .forward(tape, store, &encoded, &self.box_head, self.config.frame_mode);
        let mask_features = self.mask_branch.forward(tape, store, &encoded);
        let layers = decoder
            .iter()
            .map(|s| self.heads(tape, store, s, mask_features))
            .collect();
        Ok(ModelOutput {
            layers,
            decoder,
            encoded,
            mask_features,
        })
    }

    /// Final-layer prediction for a whole video of `[0, 1]` frames `[T, 3, H, W]`.
    ///
    /// With `subsample = Some(k)` the instance embeddings, and hence the class
    /// scores and mask heads, come from `k` evenly spaced frames; boxes and
    /// masks still cover every frame.
    pub fn predict(
        &self,
        store: &ParamStore,
        frames: &Array,
        subsample: Option<usize>,
    ) -> Result<PredictionSet, ModelError> {
        let tape = Tape::inference();
        let out = self.forward(&tape, store, tape.constant(normalize_frames(frames)))?;
        let last = out.layers.last().expect("at least one decoder layer");
        let t = frames.dim(0);
        let Some(k) = subsample.filter(|&k| k < t) else {
            return Ok(last.to_prediction_set());
        };
        if k == 0 {
            return Err(ModelError::ZeroSubsample);
        }
        let picked = even_frames(t, k);
        let sub = out.encoded.select_frames(&picked);
        let states = self
            .decoder
            .forward(&tape, store, &sub, &self.box_head, self.config.frame_mode);
        let state = states.last().unwrap();
        let omega = self.controller.forward(&tape, store, state.instances);
        let boxes = out.decoder.last().unwrap().boxes;
        let mixed = LayerPrediction {
            class_logits: self.class_head.forward(&tape, store, state.instances),
            boxes,
            mask_logits: dynamic_masks(&tape, out.mask_features, omega, boxes.narrow(2, 0, 2)),
        };
        Ok(mixed.to_prediction_set())
    }

    /// Mask logit resolution for a frame size.
    pub fn mask_size(height: usize, width: usize) -> (usize, usize) {
        (height / MASK_STRIDE, width / MASK_STRIDE)
    }
}

/// `k` evenly spaced frame indices out of `t` (the middle frame when `k = 1`).
pub fn even_frames(t: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= t);
    if k == 1 {
        return vec![(t - 1) / 2];
    }
    (0..k)
        .map(|i| ((i * (t - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect()
}
