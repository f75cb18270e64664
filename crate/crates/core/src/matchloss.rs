//! Sequence-level bipartite matching and the set prediction loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_l1, generalized_iou, Box};
use crate::maskops::{resize_mask, Mask, ResizeMode};
use crate::model::LayerPrediction;
use crate::tensor::{Array, FocalParams, Tape, Var};

/// Largest ground-truth count accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("{gt} ground-truth instances cannot be matched to {preds} predictions")]
    TooManyTargets { gt: usize, preds: usize },
    #[error("cost matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix rows have different lengths")]
    Ragged,
    #[error("exhaustive search supports at most {BRUTE_FORCE_LIMIT} targets, got {0}")]
    TooLarge(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("instance {0} is absent from every frame")]
    NeverPresent(usize),
    #[error("instance {instance} frame {frame}: box and mask must be present together")]
    Unpaired { instance: usize, frame: usize },
    #[error("instance {instance} has {found} frames, expected {expected}")]
    Length {
        instance: usize,
        expected: usize,
        found: usize,
    },
    #[error("instance {instance} frame {frame}: mask is {found:?}, expected {expected:?}")]
    Resolution {
        instance: usize,
        frame: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("expected one assignment per layer ({layers}), got {assignments}")]
    AssignmentCount { layers: usize, assignments: usize },
    #[error("assignment covers {found} ground-truth instances, annotation has {expected}")]
    AssignmentSize { expected: usize, found: usize },
    #[error("assignment refers to prediction {pred} of {queries}")]
    PredictionIndex { pred: usize, queries: usize },
    #[error("prediction covers {found} frames, annotation has {expected}")]
    Frames { expected: usize, found: usize },
    #[error("class {class} outside the {classes} predicted classes")]
    Class { class: usize, classes: usize },
    #[error("annotation size {gt:?} does not match mask logits of {logits:?} at stride 8")]
    Resolution { gt: (usize, usize), logits: (usize, usize) },
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// One ground-truth instance across a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTrack {
    /// Class index in `0..K`.
    pub class: usize,
    pub boxes: Vec<Option<Box>>,
    /// Full-resolution binary masks.
    pub masks: Vec<Option<Mask>>,
}

impl InstanceTrack {
    pub fn present_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(|(t, _)| t)
    }
}

/// Ground truth of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    frames: usize,
    height: usize,
    width: usize,
    instances: Vec<InstanceTrack>,
}

impl VideoAnnotation {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        instances: Vec<InstanceTrack>,
    ) -> Result<Self, AnnotationError> {
        for (i, inst) in instances.iter().enumerate() {
            for found in [inst.boxes.len(), inst.masks.len()] {
                if found != frames {
                    return Err(AnnotationError::Length {
                        instance: i,
                        expected: frames,
                        found,
                    });
                }
            }
            for (t, (b, m)) in inst.boxes.iter().zip(&inst.masks).enumerate() {
                if b.is_some() != m.is_some() {
                    return Err(AnnotationError::Unpaired { instance: i, frame: t });
                }
                if let Some(m) = m {
                    if m.dims() != (height, width) {
                        return Err(AnnotationError::Resolution {
                            instance: i,
                            frame: t,
                            expected: (height, width),
                            found: m.dims(),
                        });
                    }
                }
            }
            if inst.boxes.iter().all(|b| b.is_none()) {
                return Err(AnnotationError::NeverPresent(i));
            }
        }
        Ok(Self {
            frames,
            height,
            width,
            instances,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn instances(&self) -> &[InstanceTrack] {
        &self.instances
    }

    /// Restricts to the given frames, dropping instances absent from all of them.
    pub fn select_frames(&self, frames: &[usize]) -> Self {
        let instances = self
            .instances
            .iter()
            .map(|inst| InstanceTrack {
                class: inst.class,
                boxes: frames.iter().map(|&t| inst.boxes[t]).collect(),
                masks: frames.iter().map(|&t| inst.masks[t].clone()).collect(),
            })
            .filter(|inst| inst.boxes.iter().any(|b| b.is_some()))
            .collect();
        Self {
            frames: frames.len(),
            height: self.height,
            width: self.width,
            instances,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub dice: f64,
    /// Class-loss weight of predictions matched to nothing.
    pub no_object: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal: 2.0,
            dice: 5.0,
            no_object: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn focal_params(&self) -> FocalParams {
        FocalParams {
            alpha: Some(self.focal_alpha),
            gamma: self.focal_gamma,
        }
    }
}

/// Injective map from ground-truth index to prediction index.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pred_for_gt: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    fn from_cols(cost: &[Vec<f64>], cols: Vec<usize>) -> Self {
        let total = cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        Self {
            pred_for_gt: cols,
            cost: total,
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pred_for_gt.iter().copied().enumerate()
    }
}

/// `cost[i][n] = −p_n(c_i) + mean over present frames of (λ_L1·L1 + λ_giou·(1 − GIoU))`.
///
/// `class_probs` is `[N][K + 1]`, `boxes` is `[T][N]`.
pub fn matching_cost(
    class_probs: &[Vec<f64>],
    boxes: &[Vec<Box>],
    gt: &VideoAnnotation,
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let n = class_probs.len();
    gt.instances
        .iter()
        .map(|inst| {
            let present: Vec<usize> = inst.present_frames().collect();
            (0..n)
                .map(|q| {
                    let box_cost: f64 = present
                        .iter()
                        .map(|&t| {
                            let g = inst.boxes[t].unwrap();
                            let p = boxes[t][q];
                            w.l1 * box_l1(&p, &g) + w.giou * (1.0 - generalized_iou(&p.to_corners(), &g.to_corners()))
                        })
                        .sum::<f64>()
                        / present.len() as f64;
                    -class_probs[q][inst.class] + box_cost
                })
                .collect()
        })
        .collect()
}

fn check_matrix(cost: &[Vec<f64>]) -> Result<(usize, usize), MatchError> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(MatchError::Ragged);
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite { row: i, col: j });
        }
    }
    if n > m {
        return Err(MatchError::TooManyTargets { gt: n, preds: m });
    }
    Ok((n, m))
}

/// Shortest-augmenting-path assignment of every row of `cost` (rows ≤ columns)
/// restricted to the listed columns. Returns the chosen column per row.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn subtotal(cost: &[Vec<f64>], rows: &[usize], chosen: &[usize]) -> f64 {
    rows.iter().zip(chosen).map(|(&i, &j)| cost[i][j]).sum()
}

/// Minimum-cost injective assignment of rows (ground truth) to columns
/// (predictions). Among optimal assignments, earlier rows take the lowest
/// column index.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment, MatchError> {
    let (n, m) = check_matrix(cost)?;
    if n == 0 {
        return Ok(Assignment {
            pred_for_gt: Vec::new(),
            cost: 0.0,
        });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let mut cols = solve(cost, &all_rows, &(0..m).collect::<Vec<_>>());
    let mut used = vec![false; m];
    for i in 0..n {
        let rest_rows = &all_rows[i + 1..];
        let rest_opt = subtotal(cost, &all_rows[i..], &cols[i..]);
        let tol = 1e-9 * rest_opt.abs().max(1.0);
        for j in 0..cols[i] {
            if used[j] {
                continue;
            }
            let free: Vec<usize> = (0..m).filter(|&c| !used[c] && c != j).collect();
            let sub = solve(cost, rest_rows, &free);
            if cost[i][j] + subtotal(cost, rest_rows, &sub) <= rest_opt + tol {
                cols[i] = j;
                cols[i + 1..].copy_from_slice(&sub);
                break;
            }
        }
        used[cols[i]] = true;
    }
    Ok(Assignment::from_cols(cost, cols))
}

/// Exhaustive search over injections in lexicographic order.
pub fn brute_force_assign(cost: &[Vec<f64>]) -> Result<Assignment, MatchError> {
    let (n, m) = check_matrix(cost)?;
    if n > BRUTE_FORCE_LIMIT {
        return Err(MatchError::TooLarge(n));
    }
    fn go(
        cost: &[Vec<f64>],
        i: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if i == cost.len() {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, cur.clone()));
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                go(cost, i + 1, used, cur, acc + cost[i][j], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    go(cost, 0, &mut vec![false; m], &mut Vec::new(), 0.0, &mut best);
    let cols = best.map(|(_, c)| c).unwrap_or_default();
    Ok(Assignment::from_cols(cost, cols))
}

/// Loss terms summed over layers (already weighted).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.class += o.class;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.focal += o.focal;
        self.dice += o.dice;
        self.total += o.total;
    }
}

/// Matching recomputed independently for every layer.
pub fn match_layers(
    layers: &[LayerPrediction<'_>],
    gt: &VideoAnnotation,
    w: &LossWeights,
) -> Result<Vec<Assignment>, MatchError> {
    layers
        .iter()
        .map(|l| {
            let probs = softmax_rows(&l.class_logits.value());
            let boxes = l.boxes.value();
            let (t, n) = (boxes.dim(0), boxes.dim(1));
            let bx: Vec<Vec<Box>> = (0..t)
                .map(|ti| {
                    (0..n)
                        .map(|ni| Box::from_array(boxes.data()[(ti * n + ni) * 4..][..4].try_into().unwrap()))
                        .collect()
                })
                .collect();
            hungarian_assign(&matching_cost(&probs, &bx, gt, w))
        })
        .collect()
}

/// Row-wise softmax of `[N, K + 1]` logits.
fn softmax_rows(v: &Array) -> Vec<Vec<f64>> {
    v.data()
        .chunks(v.dim(1))
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn layer_loss<'t>(
    tape: &'t Tape,
    layer: &LayerPrediction<'t>,
    gt: &VideoAnnotation,
    assignment: &Assignment,
    w: &LossWeights,
    gt_small: &[Vec<Option<Mask>>],
) -> Result<(Var<'t>, LossBreakdown), LossError> {
    let n = layer.class_logits.dim(0);
    let k1 = layer.class_logits.dim(1);
    let t = layer.boxes.dim(0);
    if t != gt.frames {
        return Err(LossError::Frames {
            expected: gt.frames,
            found: t,
        });
    }
    if assignment.pred_for_gt.len() != gt.instances.len() {
        return Err(LossError::AssignmentSize {
            expected: gt.instances.len(),
            found: assignment.pred_for_gt.len(),
        });
    }
    let mut targets = vec![k1 - 1; n];
    let mut weights = vec![w.no_object; n];
    for (i, q) in assignment.pairs() {
        if q >= n {
            return Err(LossError::PredictionIndex { pred: q, queries: n });
        }
        let c = gt.instances[i].class;
        if c + 1 >= k1 {
            return Err(LossError::Class {
                class: c,
                classes: k1 - 1,
            });
        }
        targets[q] = c;
        weights[q] = 1.0;
    }
    let nll = layer.class_logits.log_softmax().pick_rows(&targets).neg();
    let class = (nll * tape.constant(Array::from_vec(&[n], weights)))
        .sum()
        .scale(w.class);
    let mut parts = LossBreakdown {
        class: class.item(),
        ..Default::default()
    };
    let mut total = class;

    let mut rows = Vec::new();
    let mut mask_rows = Vec::new();
    let mut row_w = Vec::new();
    let mut box_t = Vec::new();
    let mut mask_t = Vec::new();
    for (i, q) in assignment.pairs() {
        let inst = &gt.instances[i];
        let present: Vec<usize> = inst.present_frames().collect();
        let share = 1.0 / present.len() as f64;
        for ti in present {
            rows.push(ti * n + q);
            mask_rows.push(q * t + ti);
            row_w.push(share);
            box_t.push(inst.boxes[ti].unwrap());
            mask_t.extend_from_slice(&gt_small[i][ti].as_ref().unwrap().data);
        }
    }
    if rows.is_empty() {
        parts.total = total.item();
        return Ok((total, parts));
    }
    let p = rows.len();
    let rw = tape.constant(Array::from_vec(&[p], row_w));
    let pred_boxes = layer.boxes.reshape(&[t * n, 4]).index_select(0, &rows);
    let tgt = tape.constant(Array::from_vec(
        &[p, 4],
        box_t.iter().flat_map(|b| b.to_array()).collect(),
    ));
    let l1 = ((pred_boxes - tgt).abs().sum_axis(1, false) * rw).sum().scale(w.l1);
    let giou = (pred_boxes.giou(&box_t).neg().add_scalar(1.0) * rw).sum().scale(w.giou);

    let (h8, w8) = (layer.mask_logits.dim(2), layer.mask_logits.dim(3));
    let (h4, w4) = (gt.height / 4, gt.width / 4);
    let logits = layer
        .mask_logits
        .reshape(&[n * t, h8 * w8])
        .index_select(0, &mask_rows)
        .reshape(&[p, 1, h8, w8])
        .resize_bilinear(h4, w4)
        .reshape(&[p, h4 * w4]);
    let g = Array::from_vec(&[p, h4 * w4], mask_t);
    let focal = (logits.sigmoid_focal(&g, w.focal_params()).mean_axis(1, false) * rw)
        .sum()
        .scale(w.focal);
    let probs = logits.sigmoid();
    let gsum = tape.constant(Array::from_vec(
        &[p],
        g.data().chunks(h4 * w4).map(|r| r.iter().sum()).collect(),
    ));
    let inter = (probs * tape.constant(g)).sum_axis(1, false);
    let ratio = inter.scale(2.0).add_scalar(1.0) / (probs.sum_axis(1, false) + gsum).add_scalar(1.0);
    let dice = (ratio.neg().add_scalar(1.0) * rw).sum().scale(w.dice);

    parts.l1 = l1.item();
    parts.giou = giou.item();
    parts.focal = focal.item();
    parts.dice = dice.item();
    total = total + l1 + giou + focal + dice;
    parts.total = total.item();
    Ok((total, parts))
}

/// Ground-truth masks at quarter resolution, `[instance][frame]`.
pub fn quarter_masks(gt: &VideoAnnotation) -> Vec<Vec<Option<Mask>>> {
    let (h4, w4) = (gt.height / 4, gt.width / 4);
    gt.instances
        .iter()
        .map(|inst| {
            inst.masks
                .iter()
                .map(|m| m.as_ref().map(|m| resize_mask(m, h4, w4, ResizeMode::Nearest)))
                .collect()
        })
        .collect()
}

/// Sum over layers of the matched set loss.
pub fn hungarian_loss<'t>(
    tape: &'t Tape,
    layers: &[LayerPrediction<'t>],
    gt: &VideoAnnotation,
    assignments: &[Assignment],
    w: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown), LossError> {
    if layers.len() != assignments.len() {
        return Err(LossError::AssignmentCount {
            layers: layers.len(),
            assignments: assignments.len(),
        });
    }
    if let Some(l) = layers.first() {
        let logits = (l.mask_logits.dim(2), l.mask_logits.dim(3));
        if (gt.height / 8, gt.width / 8) != logits || !gt.height.is_multiple_of(8) || !gt.width.is_multiple_of(8) {
            return Err(LossError::Resolution { gt: gt.size(), logits });
        }
    }
    let small = quarter_masks(gt);
    let mut total: Option<Var<'t>> = None;
    let mut parts = LossBreakdown::default();
    for (layer, a) in layers.iter().zip(assignments) {
        let (l, p) = layer_loss(tape, layer, gt, a, w, &small)?;
        parts.add(&p);
        total = Some(match total {
            Some(x) => x + l,
            None => l,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Array::scalar(0.0)));
    parts.total = total.item();
    Ok((total, parts))
}
