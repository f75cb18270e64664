//! Convolutional backbone, positional encodings and the per-frame
//! deformable transformer encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deformattn::{level_layout, DeformAttn, DeformAttnConfig, FrameMode};
use crate::geometry::pixel_center;
use crate::tensor::{
    concat, group_count, Array, Conv2d, GroupNorm, Init, LayerNorm, LevelShape, Mlp, ParamGroup, ParamId, ParamStore,
    Tape, Var,
};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("clip has no frames")]
    EmptyClip,
    #[error("frames must be [T, 3, H, W], got {0:?}")]
    FrameShape(Vec<usize>),
    #[error("frame size {height}x{width} must be a positive multiple of {multiple}")]
    FrameSize {
        height: usize,
        width: usize,
        multiple: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output width of each stride-2 stage (stage `i` has stride `2^(i+1)`).
    pub stage_widths: Vec<usize>,
    /// Strides of the levels handed to the encoder, strictly increasing. Strides
    /// beyond the last stage come from extra 3×3 stride-2 convolutions.
    pub feature_strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![8, 16, 24, 32],
            feature_strides: vec![4, 8],
        }
    }
}

impl BackboneConfig {
    pub fn last_stage_stride(&self) -> usize {
        1 << self.stage_widths.len()
    }

    /// Frame sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.last_stage_stride().max(8)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err("backbone stage widths must be positive".into());
        }
        if self.feature_strides.is_empty() {
            return Err("at least one feature stride is required".into());
        }
        if self.feature_strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err("feature strides must be strictly increasing".into());
        }
        for &s in &self.feature_strides {
            if !s.is_power_of_two() || s < 2 {
                return Err(format!("feature stride {s} is not a power of two ≥ 2"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub points: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            dim: 64,
            ffn_dim: 128,
            heads: 8,
            points: 4,
        }
    }
}

/// Toy plain convolutional network: stride-2 conv + group norm + ReLU stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<(Conv2d, GroupNorm)>,
    extra: Vec<(Conv2d, GroupNorm)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Backbone;
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &w) in config.stage_widths.iter().enumerate() {
            let conv = Conv2d::new(
                store,
                &format!("backbone.stage{i}.conv"),
                cin,
                w,
                3,
                2,
                1,
                false,
                g,
                rng,
            );
            let gn = GroupNorm::new(store, &format!("backbone.stage{i}.norm"), group_count(w, 8), w, g, rng);
            stages.push((conv, gn));
            cin = w;
        }
        let last = *config.stage_widths.last().unwrap();
        let mut extra = Vec::new();
        let mut stride = config.last_stage_stride();
        let max = *config.feature_strides.last().unwrap();
        while stride < max {
            let i = extra.len();
            let conv = Conv2d::new(
                store,
                &format!("backbone.extra{i}.conv"),
                last,
                last,
                3,
                2,
                1,
                false,
                g,
                rng,
            );
            let gn = GroupNorm::new(
                store,
                &format!("backbone.extra{i}.norm"),
                group_count(last, 8),
                last,
                g,
                rng,
            );
            extra.push((conv, gn));
            stride *= 2;
        }
        Self { config, stages, extra }
    }

    /// Channel count of the raw map at each feature stride.
    pub fn level_channels(&self) -> Vec<usize> {
        let last = *self.config.stage_widths.last().unwrap();
        self.config
            .feature_strides
            .iter()
            .map(|&s| {
                let i = s.trailing_zeros() as usize;
                if i <= self.config.stage_widths.len() {
                    self.config.stage_widths[i - 1]
                } else {
                    last
                }
            })
            .collect()
    }

    /// Raw maps `[T, C_l, H/s, W/s]` for every feature stride; frames are
    /// processed independently.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: Var<'t>) -> Vec<Var<'t>> {
        let mut by_stride = Vec::new();
        let mut x = frames;
        let mut stride = 1;
        for (conv, gn) in self.stages.iter().chain(&self.extra) {
            x = gn.forward(tape, store, conv.forward(tape, store, x)).relu();
            stride *= 2;
            by_stride.push((stride, x));
        }
        self.config
            .feature_strides
            .iter()
            .map(|s| by_stride.iter().find(|(st, _)| st == s).expect("stride produced").1)
            .collect()
    }
}

/// Sinusoidal 2-D encoding `[h·w, dim]`: the first half encodes y, the second
/// x, each as interleaved sin/cos pairs over geometric frequencies of the
/// normalized pixel-center coordinate scaled by 2π.
pub fn sine_position_encoding(height: usize, width: usize, dim: usize) -> Array {
    assert!(dim.is_multiple_of(4), "positional width must be divisible by 4");
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| 10000f64.powf((2 * (j / 2)) as f64 / half as f64))
        .collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(height * width * dim);
    for y in 0..height {
        for x in 0..width {
            for (coord, n) in [(y, height), (x, width)] {
                let c = pixel_center(coord, n) * two_pi;
                for (j, f) in freqs.iter().enumerate() {
                    let a = c / f;
                    data.push(if j % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    Array::from_vec(&[height * width, dim], data)
}

struct EncoderLayer {
    norm1: LayerNorm,
    attn: DeformAttn,
    norm2: LayerNorm,
    ffn: Mlp,
}

/// Frames encoded by the transformer encoder.
#[derive(Clone, Debug)]
pub struct EncodedVideo<'t> {
    /// `[T, S, C]` with levels laid out by `levels`.
    pub memory: Var<'t>,
    /// `[S, C]` spatial plus level encoding.
    pub pos: Var<'t>,
    pub levels: Vec<LevelShape>,
    pub strides: Vec<usize>,
    /// Input frame size.
    pub frame_size: (usize, usize),
}

impl<'t> EncodedVideo<'t> {
    pub fn frames(&self) -> usize {
        self.memory.dim(0)
    }

    /// Level `l` as `[T, C, H_l, W_l]`.
    pub fn level_map(&self, l: usize) -> Var<'t> {
        let lv = self.levels[l];
        let (t, c) = (self.memory.dim(0), self.memory.dim(2));
        self.memory
            .narrow(1, lv.start, lv.len())
            .permute(&[0, 2, 1])
            .reshape(&[t, c, lv.height, lv.width])
    }

    /// Keeps only the given frames.
    pub fn select_frames(&self, frames: &[usize]) -> EncodedVideo<'t> {
        EncodedVideo {
            memory: self.memory.index_select(0, frames),
            ..self.clone()
        }
    }
}

/// Backbone, input projections and the transformer encoder.
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    input_proj: Vec<(Conv2d, GroupNorm)>,
    level_embed: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, backbone: BackboneConfig, config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::new(store, backbone, rng);
        let c = config.dim;
        let input_proj = backbone
            .level_channels()
            .into_iter()
            .enumerate()
            .map(|(l, cin)| {
                (
                    Conv2d::new(
                        store,
                        &format!("input_proj.{l}.conv"),
                        cin,
                        c,
                        1,
                        1,
                        0,
                        true,
                        ParamGroup::Default,
                        rng,
                    ),
                    GroupNorm::new(
                        store,
                        &format!("input_proj.{l}.norm"),
                        group_count(c, 8),
                        c,
                        ParamGroup::Default,
                        rng,
                    ),
                )
            })
            .collect::<Vec<_>>();
        let levels = input_proj.len();
        let level_embed = store.add("level_embed", &[levels, c], Init::Normal(1.0), ParamGroup::Default, rng);
        let attn_cfg = DeformAttnConfig {
            dim: c,
            heads: config.heads,
            levels,
            points: config.points,
        };
        let layers = (0..config.num_layers)
            .map(|i| EncoderLayer {
                norm1: LayerNorm::new(store, &format!("encoder.{i}.norm1"), c, rng),
                attn: DeformAttn::new(store, &format!("encoder.{i}.attn"), attn_cfg, rng),
                norm2: LayerNorm::new(store, &format!("encoder.{i}.norm2"), c, rng),
                ffn: Mlp::new(store, &format!("encoder.{i}.ffn"), c, config.ffn_dim, c, 2, rng),
            })
            .collect();
        let final_norm = LayerNorm::new(store, "encoder.norm", c, rng);
        Self {
            config,
            backbone,
            input_proj,
            level_embed,
            layers,
            final_norm,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.input_proj.len()
    }

    /// Projects raw backbone maps to width `C` and flattens them into `[T, S, C]`.
    pub fn project<'t>(&self, tape: &'t Tape, store: &ParamStore, raw: &[Var<'t>]) -> (Var<'t>, Vec<LevelShape>) {
        let mut flat = Vec::new();
        let mut shapes = Vec::new();
        for ((conv, gn), x) in self.input_proj.iter().zip(raw) {
            let y = gn.forward(tape, store, conv.forward(tape, store, *x));
            let (t, c, h, w) = (y.dim(0), y.dim(1), y.dim(2), y.dim(3));
            flat.push(y.reshape(&[t, c, h * w]).permute(&[0, 2, 1]));
            shapes.push((h, w));
        }
        (concat(&flat, 1), level_layout(shapes))
    }

    /// Positional encoding `[S, C]` of the level layout.
    pub fn positions<'t>(&self, tape: &'t Tape, store: &ParamStore, levels: &[LevelShape]) -> Var<'t> {
        let c = self.config.dim;
        let sine: Vec<Var<'t>> = levels
            .iter()
            .map(|l| tape.constant(sine_position_encoding(l.height, l.width, c)))
            .collect();
        let index: Vec<usize> = levels
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.len()))
            .collect();
        concat(&sine, 0) + tape.param(store, self.level_embed).index_select(0, &index)
    }

    /// Encodes frames `[T, 3, H, W]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        frames: Var<'t>,
        mode: FrameMode,
    ) -> Result<EncodedVideo<'t>, EncoderError> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(EncoderError::FrameShape(shape));
        }
        if shape[0] == 0 {
            return Err(EncoderError::EmptyClip);
        }
        let m = self.backbone.config.size_multiple();
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(EncoderError::FrameSize {
                height: h,
                width: w,
                multiple: m,
            });
        }
        let raw = self.backbone.forward(tape, store, frames);
        let (mut x, levels) = self.project(tape, store, &raw);
        let pos = self.positions(tape, store, &levels);
        let t = shape[0];
        let s = x.dim(1);
        let grid: Vec<f64> = levels
            .iter()
            .flat_map(|l| {
                (0..l.height).flat_map(move |y| {
                    (0..l.width).flat_map(move |xx| [pixel_center(xx, l.width), pixel_center(y, l.height)])
                })
            })
            .collect();
        let refs = tape.constant(Array::from_vec(&[1, s, 2], grid)).expand(&[t, s, 2]);
        for layer in &self.layers {
            let q = layer.norm1.forward(tape, store, x);
            let values = layer.attn.project_values(tape, store, q);
            let (out, _) = layer.attn.forward(tape, store, q + pos, refs, values, &levels, mode);
            x = x + out;
            x = x + layer.ffn.forward(tape, store, layer.norm2.forward(tape, store, x));
        }
        Ok(EncodedVideo {
            memory: self.final_norm.forward(tape, store, x),
            pos,
            levels,
            strides: self.backbone.config.feature_strides.clone(),
            frame_size: (h, w),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(t: usize, h: usize, w: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_vec(
            &[t, 3, h, w],
            (0..t * 3 * h * w).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
    }

    fn small_encoder(strides: Vec<usize>) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            BackboneConfig {
                stage_widths: vec![4, 8, 8, 8],
                feature_strides: strides,
            },
            EncoderConfig {
                num_layers: 2,
                dim: 16,
                ffn_dim: 32,
                heads: 2,
                points: 2,
            },
            &mut rng,
        );
        (store, enc)
    }

    #[test]
    fn backbone_shapes_follow_strides() {
        let (store, enc) = small_encoder(vec![4, 8]);
        let tape = Tape::inference();
        let raw = enc.backbone.forward(&tape, &store, tape.constant(frames(1, 64, 64, 0)));
        assert_eq!(raw[0].shape(), vec![1, 8, 16, 16]);
        assert_eq!(raw[1].shape(), vec![1, 8, 8, 8]);
        let (store, enc) = small_encoder(vec![8, 16, 32, 64]);
        let raw = enc.backbone.forward(&tape, &store, tape.constant(frames(1, 64, 64, 0)));
        let sizes: Vec<usize> = raw.iter().map(|r| r.dim(2)).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1]);
    }

    #[test]
    fn zero_frame_gives_zero_backbone_features() {
        let (store, enc) = small_encoder(vec![4, 8]);
        let tape = Tape::inference();
        for r in enc
            .backbone
            .forward(&tape, &store, tape.constant(Array::zeros(&[1, 3, 32, 32])))
        {
            assert!(r.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sine_encoding_properties() {
        let a = sine_position_encoding(4, 4, 16);
        assert_eq!(a, sine_position_encoding(4, 4, 16));
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        for row in a.data().chunks(16) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 8f64.sqrt()).abs() < 1e-12);
        }
        // (x=1, y=2) vs (x=2, y=1)
        let p12 = &a.data()[(2 * 4 + 1) * 16..][..16];
        let p21 = &a.data()[(4 + 2) * 16..][..16];
        assert_ne!(p12, p21);
    }

    #[test]
    fn frames_are_encoded_independently() {
        let (store, enc) = small_encoder(vec![4, 8]);
        let both = frames(3, 32, 32, 9);
        let first = Array::from_vec(&[2, 3, 32, 32], both.data()[..2 * 3 * 32 * 32].to_vec());
        let tape = Tape::inference();
        let a = enc
            .forward(&tape, &store, tape.constant(both), FrameMode::PerFrame)
            .unwrap();
        let b = enc
            .forward(&tape, &store, tape.constant(first), FrameMode::PerFrame)
            .unwrap();
        let n = b.memory.value().len();
        assert_eq!(&a.memory.value().data()[..n], b.memory.value().data());
        assert_eq!(a.memory.shape()[1..], b.memory.shape()[1..]);
    }

    #[test]
    fn permuting_frames_permutes_outputs() {
        let (store, enc) = small_encoder(vec![4, 8]);
        let x = frames(3, 32, 32, 10);
        let per = 3 * 32 * 32;
        let mut swapped = x.data()[2 * per..].to_vec();
        swapped.extend_from_slice(&x.data()[per..2 * per]);
        swapped.extend_from_slice(&x.data()[..per]);
        let tape = Tape::inference();
        let a = enc
            .forward(&tape, &store, tape.constant(x), FrameMode::PerFrame)
            .unwrap()
            .memory
            .value();
        let b = enc
            .forward(
                &tape,
                &store,
                tape.constant(Array::from_vec(&[3, 3, 32, 32], swapped)),
                FrameMode::PerFrame,
            )
            .unwrap()
            .memory
            .value();
        let m = a.len() / 3;
        assert_eq!(&a.data()[..m], &b.data()[2 * m..]);
        assert_eq!(&a.data()[m..2 * m], &b.data()[m..2 * m]);
    }

    #[test]
    fn flattened_frames_interact() {
        let (store, enc) = small_encoder(vec![4, 8]);
        let both = frames(2, 32, 32, 11);
        let first = Array::from_vec(&[1, 3, 32, 32], both.data()[..3 * 32 * 32].to_vec());
        let tape = Tape::inference();
        let a = enc
            .forward(&tape, &store, tape.constant(both), FrameMode::Flatten)
            .unwrap();
        let b = enc
            .forward(&tape, &store, tape.constant(first), FrameMode::Flatten)
            .unwrap();
        let n = b.memory.value().len();
        let diff = a.memory.value().data()[..n]
            .iter()
            .zip(b.memory.value().data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn shapes_preserved_and_inputs_validated() {
        let (store, enc) = small_encoder(vec![4, 8]);
        let tape = Tape::inference();
        let e = enc
            .forward(&tape, &store, tape.constant(frames(2, 32, 48, 3)), FrameMode::PerFrame)
            .unwrap();
        assert_eq!(e.memory.shape(), vec![2, 8 * 12 + 4 * 6, 16]);
        assert_eq!(e.level_map(1).shape(), vec![2, 16, 4, 6]);
        assert_eq!(
            enc.forward(
                &tape,
                &store,
                tape.constant(Array::zeros(&[0, 3, 32, 32])),
                FrameMode::PerFrame
            )
            .unwrap_err(),
            EncoderError::EmptyClip
        );
        assert!(matches!(
            enc.forward(
                &tape,
                &store,
                tape.constant(Array::zeros(&[1, 3, 30, 32])),
                FrameMode::PerFrame
            ),
            Err(EncoderError::FrameSize { .. })
        ));
    }
}
