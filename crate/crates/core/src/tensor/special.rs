//! Fused kernels specific to this model: multi-scale deformable sampling, the
//! sigmoid focal loss and generalized IoU.

use std::rc::Rc;

use super::array::Array;
use super::ops::stable_sigmoid;
use super::tape::Var;
use crate::geometry::{giou_with_grad, Box};

/// Spatial extent and offset of one pyramid level inside a flattened value tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    /// Offset of the level's first location along the flattened spatial axis.
    pub start: usize,
}

impl LevelShape {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which frame of the value tensor a sampling point reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSource {
    /// The query's own batch entry.
    Own,
    /// A fixed frame index (used when frames are concatenated as extra levels).
    Frame(usize),
}

/// Level and frame for each of the `P` sampling slots of a head.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub levels: Vec<LevelShape>,
    pub points: Vec<(usize, FrameSource)>,
}

impl SamplingPlan {
    /// `points_per_level` samples on every level of the query's own frame.
    pub fn per_frame(levels: Vec<LevelShape>, points_per_level: usize) -> Self {
        let points = (0..levels.len())
            .flat_map(|l| std::iter::repeat_n((l, FrameSource::Own), points_per_level))
            .collect();
        Self { levels, points }
    }

    /// The same per-level pattern repeated on each of `frames` frames.
    pub fn across_frames(levels: Vec<LevelShape>, points_per_level: usize, frames: usize) -> Self {
        let mut points = Vec::new();
        for f in 0..frames {
            for l in 0..levels.len() {
                points.extend(std::iter::repeat_n((l, FrameSource::Frame(f)), points_per_level));
            }
        }
        Self { levels, points }
    }

    pub fn spatial_len(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }
}

struct Tap {
    offset: usize,
    weight: f64,
    // derivative of the tap weight w.r.t. normalized x and y
    dwx: f64,
    dwy: f64,
}

/// Bilinear taps for a normalized point, including weight derivatives.
fn taps(x: f64, y: f64, lvl: &LevelShape, base: usize, heads: usize, head: usize, head_dim: usize) -> Vec<Tap> {
    let (w, h) = (lvl.width as f64, lvl.height as f64);
    let px = x * w - 0.5;
    let py = y * h - 0.5;
    let mut out = Vec::with_capacity(4);
    if !px.is_finite() || !py.is_finite() {
        return out;
    }
    let x0 = px.floor();
    let y0 = py.floor();
    let lx = px - x0;
    let ly = py - y0;
    for (dy, wy, dwy) in [(0.0, 1.0 - ly, -h), (1.0, ly, h)] {
        for (dx, wx, dwx) in [(0.0, 1.0 - lx, -w), (1.0, lx, w)] {
            let (cx, cy) = (x0 + dx, y0 + dy);
            if cx < 0.0 || cy < 0.0 || cx >= w || cy >= h {
                continue;
            }
            let s = lvl.start + cy as usize * lvl.width + cx as usize;
            out.push(Tap {
                offset: ((base + s) * heads + head) * head_dim,
                weight: wx * wy,
                dwx: dwx * wy,
                dwy: wx * dwy,
            });
        }
    }
    out
}

/// Multi-scale deformable sampling.
///
/// * `value`: `[Bv, S, heads, head_dim]` projected values of every frame
/// * `locations`: `[B, Q, heads, P, 2]` normalized `(x, y)` sampling points
/// * `weights`: `[B, Q, heads, P]` attention weights
///
/// Returns `[B, Q, heads * head_dim]`: per head, the weighted sum of
/// bilinearly sampled values.
pub fn deform_sample<'t>(value: Var<'t>, locations: Var<'t>, weights: Var<'t>, plan: &SamplingPlan) -> Var<'t> {
    let v = value.value();
    let loc = locations.value();
    let att = weights.value();
    let (bv, s, heads, hd) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
    assert_eq!(s, plan.spatial_len(), "value length does not match the level plan");
    let ls = loc.shape();
    assert_eq!(ls.len(), 5);
    let (b, q, p) = (ls[0], ls[1], ls[3]);
    assert_eq!(ls[2], heads);
    assert_eq!(ls[4], 2);
    assert_eq!(p, plan.points.len());
    assert_eq!(att.shape(), &[b, q, heads, p]);
    for &(_, src) in &plan.points {
        match src {
            FrameSource::Own => assert_eq!(b, bv, "own-frame sampling needs one value entry per batch entry"),
            FrameSource::Frame(f) => assert!(f < bv, "frame {f} out of range"),
        }
    }
    let plan = Rc::new(plan.clone());
    let mut out = vec![0.0; b * q * heads * hd];
    for bi in 0..b {
        for qi in 0..q {
            for h in 0..heads {
                let o = &mut out[((bi * q + qi) * heads + h) * hd..][..hd];
                for (pi, &(lvl, src)) in plan.points.iter().enumerate() {
                    let idx = ((bi * q + qi) * heads + h) * p + pi;
                    let a = att.data()[idx];
                    let (x, y) = (loc.data()[idx * 2], loc.data()[idx * 2 + 1]);
                    let frame = match src {
                        FrameSource::Own => bi,
                        FrameSource::Frame(f) => f,
                    };
                    for t in taps(x, y, &plan.levels[lvl], frame * s, heads, h, hd) {
                        let vv = &v.data()[t.offset..t.offset + hd];
                        let c = a * t.weight;
                        for (oo, &x) in o.iter_mut().zip(vv) {
                            *oo += c * x;
                        }
                    }
                }
            }
        }
    }
    let need_v = value.requires_grad();
    let need_l = locations.requires_grad();
    let need_w = weights.requires_grad();
    value.tape.push(
        Array::from_vec(&[b, q, heads * hd], out),
        &[value, locations, weights],
        move |ctx| {
            let g = ctx.grad.data();
            let v = ctx.inputs[0].data();
            let loc = ctx.inputs[1].data();
            let att = ctx.inputs[2].data();
            let mut dv = need_v.then(|| vec![0.0; v.len()]);
            let mut dl = need_l.then(|| vec![0.0; loc.len()]);
            let mut da = need_w.then(|| vec![0.0; att.len()]);
            for bi in 0..b {
                for qi in 0..q {
                    for h in 0..heads {
                        let go = &g[((bi * q + qi) * heads + h) * hd..][..hd];
                        for (pi, &(lvl, src)) in plan.points.iter().enumerate() {
                            let idx = ((bi * q + qi) * heads + h) * p + pi;
                            let a = att[idx];
                            let (x, y) = (loc[idx * 2], loc[idx * 2 + 1]);
                            let frame = match src {
                                FrameSource::Own => bi,
                                FrameSource::Frame(f) => f,
                            };
                            let (mut ga, mut gx, mut gy) = (0.0, 0.0, 0.0);
                            for t in taps(x, y, &plan.levels[lvl], frame * s, heads, h, hd) {
                                let vv = &v[t.offset..t.offset + hd];
                                let dot: f64 = vv.iter().zip(go).map(|(a, b)| a * b).sum();
                                ga += t.weight * dot;
                                gx += t.dwx * dot;
                                gy += t.dwy * dot;
                                if let Some(dv) = dv.as_mut() {
                                    let c = a * t.weight;
                                    for (d, &gg) in dv[t.offset..t.offset + hd].iter_mut().zip(go) {
                                        *d += c * gg;
                                    }
                                }
                            }
                            if let Some(da) = da.as_mut() {
                                da[idx] = ga;
                            }
                            if let Some(dl) = dl.as_mut() {
                                dl[idx * 2] = a * gx;
                                dl[idx * 2 + 1] = a * gy;
                            }
                        }
                    }
                }
            }
            vec![
                dv.map(|d| Array::from_vec(ctx.inputs[0].shape(), d)),
                dl.map(|d| Array::from_vec(ctx.inputs[1].shape(), d)),
                da.map(|d| Array::from_vec(ctx.inputs[2].shape(), d)),
            ]
        },
    )
}

/// Focal loss hyper-parameters. `alpha = None` disables class weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: Option<f64>,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: Some(0.25),
            gamma: 2.0,
        }
    }
}

/// Per-element sigmoid focal loss and its derivative w.r.t. the logit.
pub fn focal_term(logit: f64, target: f64, fp: FocalParams) -> (f64, f64) {
    let p = stable_sigmoid(logit);
    // binary cross entropy with logits, numerically stable
    let ce = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let dce = p - target;
    let pt = p * target + (1.0 - p) * (1.0 - target);
    let dpt = p * (1.0 - p) * (2.0 * target - 1.0);
    let alpha_t = fp.alpha.map_or(1.0, |a| a * target + (1.0 - a) * (1.0 - target));
    let one_m = (1.0 - pt).max(0.0);
    let modulator = one_m.powf(fp.gamma);
    let loss = alpha_t * modulator * ce;
    let dmod = if fp.gamma == 0.0 {
        0.0
    } else {
        -fp.gamma * one_m.powf(fp.gamma - 1.0) * dpt
    };
    (loss, alpha_t * (dmod * ce + modulator * dce))
}

impl<'t> Var<'t> {
    /// Elementwise sigmoid focal loss of logits against constant targets.
    pub fn sigmoid_focal(self, targets: &Array, fp: FocalParams) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "focal loss shape mismatch");
        let (loss, grad): (Vec<f64>, Vec<f64>) = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| focal_term(l, t, fp))
            .unzip();
        let grad = Rc::new(grad);
        self.tape.push(Array::from_vec(x.shape(), loss), &[self], move |ctx| {
            let g: Vec<f64> = ctx.grad.data().iter().zip(grad.iter()).map(|(a, b)| a * b).collect();
            vec![Some(Array::from_vec(ctx.grad.shape(), g))]
        })
    }

    /// Generalized IoU between rows of center-form boxes `[P, 4]` and constant targets.
    pub fn giou(self, targets: &[Box]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), &[targets.len(), 4]);
        let mut vals = Vec::with_capacity(targets.len());
        let mut grads = Vec::with_capacity(targets.len() * 4);
        for (row, t) in x.data().chunks(4).zip(targets) {
            let pred = Box::from_array([row[0], row[1], row[2], row[3]]).to_corners();
            let (v, g) = giou_with_grad(&pred, &t.to_corners());
            vals.push(v);
            // corners -> (cx, cy, w, h)
            grads.extend_from_slice(&[g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])]);
        }
        let grads = Rc::new(grads);
        let n = targets.len();
        self.tape.push(Array::from_vec(&[n], vals), &[self], move |ctx| {
            let g = ctx.grad.data();
            let d: Vec<f64> = grads.iter().enumerate().map(|(i, v)| v * g[i / 4]).collect();
            vec![Some(Array::from_vec(&[n, 4], d))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_single_pixel_value() {
        let (l, _) = focal_term(0.0, 1.0, FocalParams::default());
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn focal_derivative_matches_finite_differences() {
        for fp in [
            FocalParams::default(),
            FocalParams {
                alpha: None,
                gamma: 0.0,
            },
            FocalParams {
                alpha: Some(0.7),
                gamma: 1.5,
            },
        ] {
            for &(x, t) in &[(0.3, 1.0), (-1.7, 0.0), (4.0, 0.0), (-0.2, 1.0)] {
                let h = 1e-6;
                let fd = (focal_term(x + h, t, fp).0 - focal_term(x - h, t, fp).0) / (2.0 * h);
                let an = focal_term(x, t, fp).1;
                assert!((fd - an).abs() < 1e-8, "{fp:?} x={x} t={t}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn plans_enumerate_points() {
        let lv = vec![
            LevelShape {
                height: 2,
                width: 2,
                start: 0,
            },
            LevelShape {
                height: 1,
                width: 1,
                start: 4,
            },
        ];
        let p = SamplingPlan::per_frame(lv.clone(), 3);
        assert_eq!(p.points.len(), 6);
        assert_eq!(p.spatial_len(), 5);
        let f = SamplingPlan::across_frames(lv, 2, 3);
        assert_eq!(f.points.len(), 12);
        assert_eq!(f.points[4], (0, FrameSource::Frame(1)));
    }
}
