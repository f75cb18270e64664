//! Multi-scale deformable attention over one frame's feature pyramid.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bilinear_sample, pixel_center, FeatureMap};
use crate::tensor::{
    concat, deform_sample, Array, Init, LevelShape, Linear, ParamGroup, ParamStore, SamplingPlan, Tape, Var,
};

#[derive(Debug, Error, PartialEq)]
pub enum AttnError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} pyramid levels, got {found}")]
    LevelCount { expected: usize, found: usize },
    #[error("expected width {expected}, got {found}")]
    Width { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformAttnConfig {
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    /// Sampling points per level and head.
    pub points: usize,
}

impl DeformAttnConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Sampling slots per head within one frame.
    pub fn slots(&self) -> usize {
        self.levels * self.points
    }
}

/// How sampling slots are laid out over frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    /// Each query samples only its own frame.
    PerFrame,
    /// Every query samples every frame, with frames acting as extra levels.
    Flatten,
}

/// Anchor that sampling offsets are relative to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
    /// `(w, h)` when the anchor is a box.
    pub size: Option<(f64, f64)>,
}

/// Sampling locations `[B, Q, heads, P, 2]` and attention weights
/// `[B, Q, heads, P]` from one attention call.
#[derive(Clone, Debug)]
pub struct AttnTrace {
    pub locations: Rc<Array>,
    pub weights: Rc<Array>,
}

#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub config: DeformAttnConfig,
    pub value_proj: Linear,
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub output_proj: Linear,
}

impl DeformAttn {
    pub fn new(store: &mut ParamStore, name: &str, config: DeformAttnConfig, rng: &mut impl Rng) -> Self {
        assert!(
            config.dim.is_multiple_of(config.heads),
            "width must be divisible by heads"
        );
        let c = config.dim;
        let slots = config.slots();
        let value_proj = Linear::new(store, &format!("{name}.value_proj"), c, c, ParamGroup::Default, rng);
        let offset_proj = Linear::with_init(
            store,
            &format!("{name}.sampling_offsets"),
            c,
            config.heads * slots * 2,
            Init::Zeros,
            Init::Zeros,
            ParamGroup::SamplingProjection,
            rng,
        );
        store.set(offset_proj.bias.unwrap(), ring_bias(&config));
        let weight_proj = Linear::with_init(
            store,
            &format!("{name}.attention_weights"),
            c,
            config.heads * slots,
            Init::Zeros,
            Init::Zeros,
            ParamGroup::Default,
            rng,
        );
        let output_proj = Linear::new(store, &format!("{name}.output_proj"), c, c, ParamGroup::Default, rng);
        Self {
            config,
            value_proj,
            offset_proj,
            weight_proj,
            output_proj,
        }
    }

    /// Projects the value source `[Bv, S, C]` into `[Bv, S, heads, head_dim]`.
    pub fn project_values<'t>(&self, tape: &'t Tape, store: &ParamStore, value: Var<'t>) -> Var<'t> {
        let (bv, s) = (value.dim(0), value.dim(1));
        self.value_proj
            .forward(tape, store, value)
            .reshape(&[bv, s, self.config.heads, self.config.head_dim()])
    }

    /// Attention of queries `[B, Q, C]` with references `[B, Q, 2]` (points) or
    /// `[B, Q, 4]` (center-form boxes) over `values` from [`Self::project_values`].
    ///
    /// With [`FrameMode::PerFrame`] query batch entry `b` reads value entry `b`;
    /// with [`FrameMode::Flatten`] every query reads all value entries.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        reference: Var<'t>,
        values: Var<'t>,
        levels: &[LevelShape],
        mode: FrameMode,
    ) -> (Var<'t>, AttnTrace) {
        let cfg = self.config;
        assert_eq!(levels.len(), cfg.levels);
        let (b, q) = (query.dim(0), query.dim(1));
        let slots = cfg.slots();
        let offsets = self
            .offset_proj
            .forward(tape, store, query)
            .reshape(&[b, q, cfg.heads, slots, 2]);
        let locations = match reference.dim(2) {
            2 => {
                let mut scale = Vec::with_capacity(slots * 2);
                for l in levels {
                    for _ in 0..cfg.points {
                        scale.push(1.0 / l.width as f64);
                        scale.push(1.0 / l.height as f64);
                    }
                }
                let scale = tape.constant(Array::from_vec(&[slots, 2], scale));
                reference.reshape(&[b, q, 1, 1, 2]) + offsets * scale
            }
            4 => {
                let xy = reference.narrow(2, 0, 2).reshape(&[b, q, 1, 1, 2]);
                let wh = reference.narrow(2, 2, 2).reshape(&[b, q, 1, 1, 2]);
                xy + offsets * wh.scale(0.5 / cfg.points as f64)
            }
            d => panic!("reference must have 2 or 4 coordinates, got {d}"),
        };
        let logits = self
            .weight_proj
            .forward(tape, store, query)
            .reshape(&[b, q, cfg.heads, slots]);
        let (locations, logits, plan) = match mode {
            FrameMode::PerFrame => (locations, logits, SamplingPlan::per_frame(levels.to_vec(), cfg.points)),
            FrameMode::Flatten => {
                let frames = values.dim(0);
                (
                    concat(&vec![locations; frames], 3),
                    concat(&vec![logits; frames], 3),
                    SamplingPlan::across_frames(levels.to_vec(), cfg.points, frames),
                )
            }
        };
        let weights = logits.softmax();
        let trace = AttnTrace {
            locations: locations.value(),
            weights: weights.value(),
        };
        let sampled = deform_sample(values, locations, weights, &plan);
        (self.output_proj.forward(tape, store, sampled), trace)
    }

    /// Single query against one frame's pyramid of `C × H_l × W_l` maps.
    pub fn attend(
        &self,
        store: &ParamStore,
        query: &[f64],
        reference: ReferencePoint,
        pyramid: &[FeatureMap],
    ) -> Result<Vec<f64>, AttnError> {
        let c = self.config.dim;
        check_inputs(&self.config, query, &reference, pyramid)?;
        let levels = level_layout(pyramid.iter().map(|m| (m.height, m.width)));
        let tape = Tape::inference();
        let values = tape.constant(flatten_pyramid(pyramid));
        let values = self.project_values(&tape, store, values);
        let q = tape.constant(Array::from_vec(&[1, 1, c], query.to_vec()));
        let r = match reference.size {
            None => Array::from_vec(&[1, 1, 2], vec![reference.x, reference.y]),
            Some((w, h)) => Array::from_vec(&[1, 1, 4], vec![reference.x, reference.y, w, h]),
        };
        let (out, _) = self.forward(&tape, store, q, tape.constant(r), values, &levels, FrameMode::PerFrame);
        Ok(out.value().data().to_vec())
    }
}

fn check_inputs(
    cfg: &DeformAttnConfig,
    query: &[f64],
    reference: &ReferencePoint,
    pyramid: &[FeatureMap],
) -> Result<(), AttnError> {
    if query.len() != cfg.dim {
        return Err(AttnError::Width {
            expected: cfg.dim,
            found: query.len(),
        });
    }
    if pyramid.len() != cfg.levels {
        return Err(AttnError::LevelCount {
            expected: cfg.levels,
            found: pyramid.len(),
        });
    }
    if let Some(m) = pyramid.iter().find(|m| m.channels != cfg.dim) {
        return Err(AttnError::Width {
            expected: cfg.dim,
            found: m.channels,
        });
    }
    if !query.iter().all(|v| v.is_finite()) {
        return Err(AttnError::NonFinite("query"));
    }
    let (w, h) = reference.size.unwrap_or((0.0, 0.0));
    if ![reference.x, reference.y, w, h].iter().all(|v| v.is_finite()) {
        return Err(AttnError::NonFinite("reference"));
    }
    if !pyramid.iter().all(|m| m.data.iter().all(|v| v.is_finite())) {
        return Err(AttnError::NonFinite("pyramid"));
    }
    Ok(())
}

/// Offset biases placing head `h`'s points on a ring in direction `2πh/heads`,
/// point `k` at distance `k + 1`.
fn ring_bias(cfg: &DeformAttnConfig) -> Array {
    let mut bias = Vec::with_capacity(cfg.heads * cfg.slots() * 2);
    for h in 0..cfg.heads {
        let theta = 2.0 * std::f64::consts::PI * h as f64 / cfg.heads as f64;
        let (s, c) = theta.sin_cos();
        let m = c.abs().max(s.abs());
        for _ in 0..cfg.levels {
            for k in 0..cfg.points {
                bias.push(c / m * (k + 1) as f64);
                bias.push(s / m * (k + 1) as f64);
            }
        }
    }
    Array::from_vec(&[cfg.heads * cfg.slots() * 2], bias)
}

/// Lays out levels of the given `(height, width)` consecutively.
pub fn level_layout(shapes: impl IntoIterator<Item = (usize, usize)>) -> Vec<LevelShape> {
    let mut start = 0;
    shapes
        .into_iter()
        .map(|(height, width)| {
            let l = LevelShape { height, width, start };
            start += height * width;
            l
        })
        .collect()
}

/// Stacks a pyramid into `[1, S, C]` in level order, row-major within a level.
pub fn flatten_pyramid(pyramid: &[FeatureMap]) -> Array {
    let c = pyramid.first().map_or(0, |m| m.channels);
    let mut data = Vec::new();
    let mut s = 0;
    for m in pyramid {
        for y in 0..m.height {
            for x in 0..m.width {
                data.extend((0..c).map(|ch| m.at(ch, y, x)));
            }
        }
        s += m.height * m.width;
    }
    Array::from_vec(&[1, s, c], data)
}

/// One normalized reference point per location of every level, at pixel centers.
pub fn encoder_reference_grid(shapes: &[(usize, usize)]) -> Vec<(f64, f64)> {
    shapes
        .iter()
        .flat_map(|&(h, w)| (0..h).flat_map(move |y| (0..w).map(move |x| (pixel_center(x, w), pixel_center(y, h)))))
        .collect()
}

/// Straightforward per-head, per-level, per-point evaluation of the attention
/// for one query, reading parameters directly from the store.
pub fn dense_reference(
    attn: &DeformAttn,
    store: &ParamStore,
    query: &[f64],
    reference: ReferencePoint,
    pyramid: &[FeatureMap],
) -> Vec<f64> {
    let cfg = attn.config;
    let c = cfg.dim;
    let hd = cfg.head_dim();
    let linear = |l: &Linear, x: &[f64]| -> Vec<f64> {
        let w = store.value(l.weight);
        let b = store.value(l.bias.unwrap());
        (0..l.out_dim)
            .map(|o| b.data()[o] + (0..l.in_dim).map(|i| x[i] * w.data()[i * l.out_dim + o]).sum::<f64>())
            .collect()
    };
    let projected: Vec<FeatureMap> = pyramid
        .iter()
        .map(|m| {
            let mut data = vec![0.0; c * m.height * m.width];
            for y in 0..m.height {
                for x in 0..m.width {
                    let v: Vec<f64> = (0..c).map(|ch| m.at(ch, y, x)).collect();
                    for (ch, pv) in linear(&attn.value_proj, &v).into_iter().enumerate() {
                        data[(ch * m.height + y) * m.width + x] = pv;
                    }
                }
            }
            FeatureMap::new(c, m.height, m.width, data)
        })
        .collect();
    let offsets = linear(&attn.offset_proj, query);
    let logits = linear(&attn.weight_proj, query);
    let mut concat_heads = vec![0.0; c];
    for h in 0..cfg.heads {
        let idx = |l: usize, k: usize| (h * cfg.levels + l) * cfg.points + k;
        let max = (0..cfg.slots())
            .map(|i| logits[h * cfg.slots() + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..cfg.slots())
            .map(|i| (logits[h * cfg.slots() + i] - max).exp())
            .sum();
        for (l, map) in projected.iter().enumerate() {
            for k in 0..cfg.points {
                let i = idx(l, k);
                let a = (logits[i] - max).exp() / z;
                let (dx, dy) = (offsets[2 * i], offsets[2 * i + 1]);
                let (x, y) = match reference.size {
                    None => (
                        reference.x + dx / map.width as f64,
                        reference.y + dy / map.height as f64,
                    ),
                    Some((w, hh)) => (
                        reference.x + dx / cfg.points as f64 * w * 0.5,
                        reference.y + dy / cfg.points as f64 * hh * 0.5,
                    ),
                };
                let s = bilinear_sample(map, x, y);
                for d in 0..hd {
                    concat_heads[h * hd + d] += a * s[h * hd + d];
                }
            }
        }
    }
    linear(&attn.output_proj, &concat_heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(rng: &mut ChaCha8Rng) -> (ParamStore, DeformAttn) {
        let mut store = ParamStore::new();
        let cfg = DeformAttnConfig {
            dim: 8,
            heads: 2,
            levels: 2,
            points: 2,
        };
        let attn = DeformAttn::new(&mut store, "attn", cfg, rng);
        (store, attn)
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            let n = store.value(id).len();
            store.set(
                id,
                Array::from_vec(&shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()),
            );
        }
    }

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn set_identity(store: &mut ParamStore, l: &Linear) {
        let n = l.in_dim;
        let mut w = Array::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        store.set(l.weight, w);
        store.set(l.bias.unwrap(), Array::zeros(&[n]));
    }

    #[test]
    fn reference_grid_examples() {
        assert_eq!(encoder_reference_grid(&[(1, 1)]), vec![(0.5, 0.5)]);
        let g = encoder_reference_grid(&[(2, 2)]);
        assert_eq!(g, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
        assert_eq!(encoder_reference_grid(&[(4, 4), (2, 2)]).len(), 20);
    }

    #[test]
    fn collapsed_attention_reads_one_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut store, attn) = small(&mut rng);
        set_identity(&mut store, &attn.value_proj);
        set_identity(&mut store, &attn.output_proj);
        // all offsets zero; head logits favor level 0 point 0 strongly
        store.set(attn.offset_proj.bias.unwrap(), Array::zeros(&[2 * 4 * 2]));
        let mut logits = Array::zeros(&[8]);
        logits.data_mut()[0] = 200.0;
        logits.data_mut()[4] = 200.0;
        store.set(attn.weight_proj.bias.unwrap(), logits);
        let pyr = vec![random_map(8, 4, 4, &mut rng), random_map(8, 2, 2, &mut rng)];
        let q = vec![0.3; 8];
        let r = ReferencePoint {
            x: pixel_center(1, 4),
            y: pixel_center(2, 4),
            size: None,
        };
        let out = attn.attend(&store, &q, r, &pyr).unwrap();
        for (ch, o) in out.iter().enumerate().take(8) {
            assert!((o - pyr[0].at(ch, 2, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_pyramid_gives_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut store, attn) = small(&mut rng);
        randomize(&mut store, &mut rng, 0.5);
        set_identity(&mut store, &attn.value_proj);
        set_identity(&mut store, &attn.output_proj);
        let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let pyr: Vec<FeatureMap> = [(5, 5), (3, 3)]
            .iter()
            .map(|&(h, w)| FeatureMap::new(8, h, w, v.iter().flat_map(|&x| std::iter::repeat_n(x, h * w)).collect()))
            .collect();
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-0.3..0.3)).collect();
        let r = ReferencePoint {
            x: 0.5,
            y: 0.5,
            size: None,
        };
        // offsets stay small, so every sample lies well inside the maps
        let out = attn.attend(&store, &q, r, &pyr).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_dense_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..100 {
            let (mut store, attn) = small(&mut rng);
            randomize(&mut store, &mut rng, 1.0);
            let pyr = vec![random_map(8, 5, 6, &mut rng), random_map(8, 3, 2, &mut rng)];
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let size = (case % 2 == 0).then(|| (rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)));
            let r = ReferencePoint {
                x: rng.random_range(0.0..1.0),
                y: rng.random_range(0.0..1.0),
                size,
            };
            let fast = attn.attend(&store, &q, r, &pyr).unwrap();
            let slow = dense_reference(&attn, &store, &q, r, &pyr);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-6, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn weights_sum_to_one_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut store, attn) = small(&mut rng);
        randomize(&mut store, &mut rng, 1.0);
        let tape = Tape::inference();
        let levels = level_layout([(4, 4), (2, 2)]);
        let values = tape.constant(Array::from_vec(
            &[3, 20, 8],
            (0..480).map(|i| (i as f64).sin()).collect(),
        ));
        let values = attn.project_values(&tape, &store, values);
        let q = tape.constant(Array::from_vec(
            &[3, 5, 8],
            (0..120).map(|i| (i as f64 * 0.7).cos()).collect(),
        ));
        let r = tape.constant(Array::full(&[3, 5, 2], 0.5));
        for mode in [FrameMode::PerFrame, FrameMode::Flatten] {
            let (_, trace) = attn.forward(&tape, &store, q, r, values, &levels, mode);
            let p = trace.weights.dim(3);
            for row in trace.weights.data().chunks(p) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_in_pyramid_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut store, attn) = small(&mut rng);
        randomize(&mut store, &mut rng, 1.0);
        // zero biases keep value and output maps linear
        store.set(attn.value_proj.bias.unwrap(), Array::zeros(&[8]));
        store.set(attn.output_proj.bias.unwrap(), Array::zeros(&[8]));
        let f = vec![random_map(8, 4, 4, &mut rng), random_map(8, 2, 2, &mut rng)];
        let g = vec![random_map(8, 4, 4, &mut rng), random_map(8, 2, 2, &mut rng)];
        let (a, b) = (0.7, -1.3);
        let mix: Vec<FeatureMap> = f
            .iter()
            .zip(&g)
            .map(|(x, y)| {
                FeatureMap::new(
                    8,
                    x.height,
                    x.width,
                    x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect(),
                )
            })
            .collect();
        let q = vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.5, 0.1, 0.2];
        let r = ReferencePoint {
            x: 0.4,
            y: 0.6,
            size: None,
        };
        let of = attn.attend(&store, &q, r, &f).unwrap();
        let og = attn.attend(&store, &q, r, &g).unwrap();
        let om = attn.attend(&store, &q, r, &mix).unwrap();
        for i in 0..8 {
            assert!((om[i] - (a * of[i] + b * og[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (store, attn) = small(&mut rng);
        let pyr = vec![random_map(8, 2, 2, &mut rng), random_map(8, 1, 1, &mut rng)];
        let r = ReferencePoint {
            x: 0.5,
            y: 0.5,
            size: None,
        };
        let mut q = vec![0.0; 8];
        q[3] = f64::NAN;
        assert_eq!(attn.attend(&store, &q, r, &pyr), Err(AttnError::NonFinite("query")));
        let mut bad = pyr.clone();
        bad[1].data[0] = f64::INFINITY;
        assert_eq!(
            attn.attend(&store, &[0.0; 8], r, &bad),
            Err(AttnError::NonFinite("pyramid"))
        );
        assert!(matches!(
            attn.attend(&store, &[0.0; 8], r, &pyr[..1]),
            Err(AttnError::LevelCount { .. })
        ));
    }

    #[test]
    fn initial_points_form_a_ring() {
        let cfg = DeformAttnConfig {
            dim: 8,
            heads: 8,
            levels: 1,
            points: 2,
        };
        let b = ring_bias(&cfg);
        let d = b.data();
        // head 0 points along +x, head 2 along +y
        assert_eq!(&d[0..4], &[1.0, 0.0, 2.0, 0.0]);
        assert!((d[2 * 4] - 0.0).abs() < 1e-12 && (d[2 * 4 + 1] - 1.0).abs() < 1e-12);
    }
}
