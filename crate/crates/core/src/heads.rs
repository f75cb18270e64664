//! Output heads: class, box, mask branch, controller and the dynamic mask head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncodedVideo;
use crate::geometry::{pixel_center, Box};
use crate::maskops::{resize_mask, rle_encode, Mask, ResizeMode, Rle};
use crate::tensor::{concat, group_count, Array, Conv2d, GroupNorm, Linear, Mlp, ParamGroup, ParamStore, Tape, Var};

/// Input channels of the dynamic mask head: branch channels plus two coordinates.
pub const MASK_HEAD_IN: usize = 10;
/// Channels of the mask branch output.
pub const MASK_BRANCH_OUT: usize = 8;
/// Hidden width of each dynamic layer.
pub const MASK_HEAD_HIDDEN: usize = 8;
/// Stride of the mask branch output relative to the input frame.
pub const MASK_STRIDE: usize = 8;

/// Layer shapes `(in, out)` of the dynamic mask head.
pub const MASK_HEAD_LAYERS: [(usize, usize); 3] = [
    (MASK_HEAD_IN, MASK_HEAD_HIDDEN),
    (MASK_HEAD_HIDDEN, MASK_HEAD_HIDDEN),
    (MASK_HEAD_HIDDEN, 1),
];

/// Number of generated parameters: weights then biases, layer by layer.
pub const fn mask_head_param_count() -> usize {
    let mut n = 0;
    let mut i = 0;
    while i < MASK_HEAD_LAYERS.len() {
        let (a, b) = MASK_HEAD_LAYERS[i];
        n += a * b + b;
        i += 1;
    }
    n
}

pub const MASK_HEAD_PARAMS: usize = mask_head_param_count();

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("mask head needs {MASK_HEAD_PARAMS} parameters, got {0}")]
    ParamCount(usize),
    #[error("mask features must have {MASK_HEAD_IN} channels of {pixels} pixels, got {len} values")]
    FeatureShape { pixels: usize, len: usize },
}

/// Linear classifier over `K` categories plus the trailing no-object class.
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub linear: Linear,
    pub num_classes: usize,
}

impl ClassHead {
    pub fn new(store: &mut ParamStore, dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, "class_head", dim, num_classes + 1, ParamGroup::Default, rng),
            num_classes,
        }
    }

    /// Logits `[N, K + 1]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, instances: Var<'t>) -> Var<'t> {
        self.linear.forward(tape, store, instances)
    }
}

/// Box embedding projection followed by a 3-layer MLP predicting logit-space
/// deltas relative to the reference box.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub embed: Linear,
    pub mlp: Mlp,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        let embed = Linear::new(store, "box_embed", dim, dim, ParamGroup::Default, rng);
        let mlp = Mlp::new(store, "box_head", dim, dim, 4, 3, rng);
        // start as the identity refinement
        let last = mlp.last().clone();
        store.set(last.weight, Array::zeros(&[dim, 4]));
        Self { embed, mlp }
    }

    /// Boxes `[T, N, 4]` in center form from box queries `[T, N, C]` and
    /// references `[T, N, 4]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, box_queries: Var<'t>, refs: Var<'t>) -> Var<'t> {
        let delta = self
            .mlp
            .forward(tape, store, self.embed.forward(tape, store, box_queries));
        (delta + refs.inverse_sigmoid(1e-5)).sigmoid()
    }
}

/// 3-layer MLP turning an instance embedding into dynamic mask-head parameters.
#[derive(Clone, Debug)]
pub struct Controller {
    pub mlp: Mlp,
}

impl Controller {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "controller", dim, dim, MASK_HEAD_PARAMS, 3, rng),
        }
    }

    /// `[N, 169]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, instances: Var<'t>) -> Var<'t> {
        self.mlp.forward(tape, store, instances)
    }
}

/// Top-down fusion of the encoded pyramid into an 8-channel map at 1/8 resolution.
#[derive(Clone, Debug)]
pub struct MaskBranch {
    lateral: Vec<Conv2d>,
    smooth: Vec<(Conv2d, GroupNorm)>,
    out_block: (Conv2d, GroupNorm),
    project: Conv2d,
}

impl MaskBranch {
    pub fn new(store: &mut ParamStore, dim: usize, width: usize, levels: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Default;
        let gn = |store: &mut ParamStore, name: &str, rng: &mut _| {
            GroupNorm::new(store, name, group_count(width, 8), width, g, rng)
        };
        let lateral = (0..levels)
            .map(|l| {
                Conv2d::new(
                    store,
                    &format!("mask_branch.lateral.{l}"),
                    dim,
                    width,
                    1,
                    1,
                    0,
                    true,
                    g,
                    rng,
                )
            })
            .collect();
        let smooth = (0..levels.saturating_sub(1))
            .map(|l| {
                (
                    Conv2d::new(
                        store,
                        &format!("mask_branch.smooth.{l}.conv"),
                        width,
                        width,
                        3,
                        1,
                        1,
                        false,
                        g,
                        rng,
                    ),
                    gn(store, &format!("mask_branch.smooth.{l}.norm"), rng),
                )
            })
            .collect();
        let out_block = (
            Conv2d::new(store, "mask_branch.out.conv", width, width, 3, 1, 1, false, g, rng),
            gn(store, "mask_branch.out.norm", rng),
        );
        let project = Conv2d::new(
            store,
            "mask_branch.project",
            width,
            MASK_BRANCH_OUT,
            1,
            1,
            0,
            true,
            g,
            rng,
        );
        Self {
            lateral,
            smooth,
            out_block,
            project,
        }
    }

    /// `[T, 8, H/8, W/8]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, encoded: &EncodedVideo<'t>) -> Var<'t> {
        let n = encoded.levels.len();
        let mut x = self.lateral[n - 1].forward(tape, store, encoded.level_map(n - 1));
        for (i, l) in (0..n - 1).rev().enumerate() {
            let lv = encoded.levels[l];
            let lat = self.lateral[l].forward(tape, store, encoded.level_map(l));
            x = x.resize_bilinear(lv.height, lv.width) + lat;
            let (conv, gn) = &self.smooth[i];
            x = gn.forward(tape, store, conv.forward(tape, store, x)).relu();
        }
        let (h, w) = encoded.frame_size;
        x = x.resize_bilinear(h / MASK_STRIDE, w / MASK_STRIDE);
        let (conv, gn) = &self.out_block;
        x = gn.forward(tape, store, conv.forward(tape, store, x)).relu();
        self.project.forward(tape, store, x)
    }
}

/// Relative coordinates `[2, h·w]`: `x − cx` then `y − cy` at pixel centers.
pub fn coord_map(height: usize, width: usize, cx: f64, cy: f64) -> Array {
    let mut data = Vec::with_capacity(2 * height * width);
    for _ in 0..height {
        for x in 0..width {
            data.push(pixel_center(x, width) - cx);
        }
    }
    for y in 0..height {
        for _ in 0..width {
            data.push(pixel_center(y, height) - cy);
        }
    }
    Array::from_vec(&[2, height * width], data)
}

/// Slices `omega` into `(weight [out][in], bias)` per layer.
fn split_omega(omega: &[f64]) -> Vec<(&[f64], &[f64])> {
    let mut off = 0;
    MASK_HEAD_LAYERS
        .iter()
        .map(|&(i, o)| {
            let w = &omega[off..off + i * o];
            let b = &omega[off + i * o..off + i * o + o];
            off += i * o + o;
            (w, b)
        })
        .collect()
}

/// Applies the three per-pixel layers (ReLU between) to channel-major
/// features `[10, pixels]`, returning one logit per pixel.
pub fn dynamic_mask_head(features: &[f64], pixels: usize, omega: &[f64]) -> Result<Vec<f64>, HeadError> {
    if omega.len() != MASK_HEAD_PARAMS {
        return Err(HeadError::ParamCount(omega.len()));
    }
    if features.len() != MASK_HEAD_IN * pixels {
        return Err(HeadError::FeatureShape {
            pixels,
            len: features.len(),
        });
    }
    let layers = split_omega(omega);
    let mut cur: Vec<Vec<f64>> = (0..MASK_HEAD_IN)
        .map(|c| features[c * pixels..(c + 1) * pixels].to_vec())
        .collect();
    for (li, (w, b)) in layers.iter().enumerate() {
        let (cin, cout) = MASK_HEAD_LAYERS[li];
        let mut next = vec![vec![0.0; pixels]; cout];
        for (o, out) in next.iter_mut().enumerate() {
            for (p, v) in out.iter_mut().enumerate() {
                let s: f64 = b[o] + (0..cin).map(|i| w[o * cin + i] * cur[i][p]).sum::<f64>();
                *v = if li + 1 < layers.len() { s.max(0.0) } else { s };
            }
        }
        cur = next;
    }
    Ok(cur.pop().unwrap())
}

/// Mask logits `[N, T, h, w]` for every query on every frame from branch
/// features `[T, 8, h, w]`, generated parameters `omega [N, 169]` and box
/// centers `[T, N, 2]`.
pub fn dynamic_masks<'t>(tape: &'t Tape, branch: Var<'t>, omega: Var<'t>, centers: Var<'t>) -> Var<'t> {
    let (t, c, h, w) = (branch.dim(0), branch.dim(1), branch.dim(2), branch.dim(3));
    assert_eq!(c, MASK_BRANCH_OUT);
    let n = omega.dim(0);
    assert_eq!(omega.dim(1), MASK_HEAD_PARAMS);
    let hw = h * w;
    let feats = branch
        .reshape(&[1, t, c, hw])
        .permute(&[0, 1, 3, 2])
        .reshape(&[1, t * hw, c])
        .expand(&[n, t * hw, c]);
    let grid = coord_map(h, w, 0.0, 0.0);
    let grid = tape.constant(grid).transpose(0, 1).reshape(&[1, 1, hw, 2]);
    let rel = (grid - centers.permute(&[1, 0, 2]).reshape(&[n, t, 1, 2])).reshape(&[n, t * hw, 2]);
    let mut x = concat(&[feats, rel], 2);
    let mut off = 0;
    for (li, &(cin, cout)) in MASK_HEAD_LAYERS.iter().enumerate() {
        let wt = omega
            .narrow(1, off, cin * cout)
            .reshape(&[n, cout, cin])
            .permute(&[0, 2, 1]);
        let b = omega.narrow(1, off + cin * cout, cout).reshape(&[n, 1, cout]);
        off += cin * cout + cout;
        x = x.bmm(wt) + b;
        if li + 1 < MASK_HEAD_LAYERS.len() {
            x = x.relu();
        }
    }
    x.reshape(&[n, t, h, w])
}

/// Plain-array model output for one clip.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// `[N][K + 1]`, no-object last.
    pub class_probs: Vec<Vec<f64>>,
    /// `[T][N]`
    pub boxes: Vec<Vec<Box>>,
    /// `[N][T]` logits at 1/8 resolution.
    pub mask_logits: Vec<Vec<Mask>>,
}

impl PredictionSet {
    pub fn num_queries(&self) -> usize {
        self.class_probs.len()
    }

    pub fn num_frames(&self) -> usize {
        self.boxes.len()
    }

    /// Best non-empty class and its probability for query `n`.
    pub fn score(&self, n: usize) -> (usize, f64) {
        let row = &self.class_probs[n];
        let mut best = (0, f64::NEG_INFINITY);
        for (k, &p) in row[..row.len() - 1].iter().enumerate() {
            if p > best.1 {
                best = (k, p);
            }
        }
        best
    }
}

/// One ranked video-level result.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInstance {
    /// Source query; every frame's mask comes from it.
    pub query: usize,
    pub class: usize,
    pub score: f64,
    /// Binary masks at the requested output resolution, one per frame.
    pub masks: Vec<Mask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub top_k: usize,
    pub score_threshold: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            score_threshold: 0.05,
        }
    }
}

/// Ranks queries by their best non-empty class probability, keeps the top
/// `top_k` above the threshold and binarizes their masks at `size`.
pub fn postprocess(pred: &PredictionSet, config: PostprocessConfig, size: (usize, usize)) -> Vec<VideoInstance> {
    let mut ranked: Vec<(usize, usize, f64)> = (0..pred.num_queries())
        .map(|n| {
            let (k, s) = pred.score(n);
            (n, k, s)
        })
        .filter(|&(_, _, s)| s > config.score_threshold)
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    ranked.truncate(config.top_k);
    ranked
        .into_iter()
        .map(|(query, class, score)| VideoInstance {
            query,
            class,
            score,
            masks: pred.mask_logits[query]
                .iter()
                .map(|m| resize_mask(m, size.0, size.1, ResizeMode::Bilinear).binarize(0.0))
                .collect(),
        })
        .collect()
}

/// One entry of the prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub segmentations: Vec<Option<Rle>>,
}

impl Prediction {
    pub fn from_instance(video_id: u64, category_id: u64, inst: &VideoInstance) -> Self {
        Self {
            video_id,
            category_id,
            score: inst.score,
            segmentations: inst
                .masks
                .iter()
                .map(|m| Some(rle_encode(m).expect("binarized masks encode")))
                .collect(),
        }
    }
}
