//! Spatio-temporal mask IoU and AP/AR over videos.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::Prediction;
use crate::maskops::{rle_decode, Mask, MaskError, MaskSeq};
use crate::vidgen::{Dataset, VidgenError};

/// IoU thresholds in hundredths: 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];
/// Recall sample points of the interpolated precision curve.
pub const RECALL_POINTS: usize = 101;
/// Detections kept per video and category when computing AP.
pub const AP_MAX_DETECTIONS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("predictions[{index}]: unknown category {id}")]
    UnknownCategory { index: usize, id: u64 },
    #[error("predictions[{index}]: unknown video {id}")]
    UnknownVideo { index: usize, id: u64 },
    #[error("mask sequences differ in resolution: {a:?} vs {b:?}")]
    Resolution { a: (usize, usize), b: (usize, usize) },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Dataset(#[from] VidgenError),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> EvalError {
    EvalError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// `Σ_t |P_t ∩ G_t| / Σ_t |P_t ∪ G_t|`. Missing frames (absent or beyond the
/// shorter sequence) are empty masks. Two entirely empty sequences give 1.
pub fn st_iou(pred: &MaskSeq, gt: &MaskSeq) -> Result<f64, EvalError> {
    if pred.dims() != gt.dims() {
        return Err(EvalError::Resolution {
            a: pred.dims(),
            b: gt.dims(),
        });
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for t in 0..pred.len().max(gt.len()) {
        let p = if t < pred.len() { pred.frame(t) } else { None };
        let g = if t < gt.len() { gt.frame(t) } else { None };
        let (i, u) = frame_overlap(p, g);
        inter += i;
        union += u;
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

fn frame_overlap(p: Option<&Mask>, g: Option<&Mask>) -> (f64, f64) {
    match (p, g) {
        (None, None) => (0.0, 0.0),
        (Some(m), None) | (None, Some(m)) => (0.0, m.data.iter().filter(|&&v| v > 0.0).count() as f64),
        (Some(p), Some(g)) => p.data.iter().zip(&g.data).fold((0.0, 0.0), |(i, u), (&a, &b)| {
            let (a, b) = (a > 0.0, b > 0.0);
            (i + (a && b) as u8 as f64, u + (a || b) as u8 as f64)
        }),
    }
}

/// Scores of one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category_id: u64,
    pub name: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

/// Values in `[0, 1]`, averaged over categories with ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub per_category: Vec<CategoryResult>,
}

pub const TABLE_COLUMNS: [&str; 5] = ["AP", "AP50", "AP75", "AR1", "AR10"];

impl EvalResult {
    /// Fixed-width table with values scaled by 100.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = TABLE_COLUMNS.iter().map(|c| format!("{c:>6}")).collect();
        out.push_str(&format!("{:<12}{}\n", "", header.join("")));
        let row = |name: &str, v: [f64; 5]| {
            format!(
                "{name:<12}{}\n",
                v.iter().map(|x| format!("{:>6.1}", x * 100.0)).collect::<String>()
            )
        };
        out.push_str(&row("all", [self.ap, self.ap50, self.ap75, self.ar1, self.ar10]));
        for c in &self.per_category {
            out.push_str(&row(&c.name, [c.ap, c.ap50, c.ap75, c.ar1, c.ar10]));
        }
        out
    }
}

/// Parses a prediction list. Errors name the offending field path.
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, EvalError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let preds: Vec<Prediction> = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner().to_string())
    })?;
    for (i, p) in preds.iter().enumerate() {
        if !p.score.is_finite() {
            return Err(schema(format!("[{i}].score"), "score must be finite"));
        }
    }
    Ok(preds)
}

/// One decoded prediction.
struct Detection {
    video: u64,
    score: f64,
    key: usize,
    masks: MaskSeq,
}

/// One decoded ground-truth track.
struct Truth {
    id: u64,
    masks: MaskSeq,
}

/// Canonical order: score descending, then video, then segmentation content,
/// so the ranking does not depend on input order.
fn rank(preds: &[Prediction]) -> Vec<usize> {
    let content = |p: &Prediction| -> Vec<(bool, [usize; 2], Vec<u64>)> {
        p.segmentations
            .iter()
            .map(|s| {
                s.as_ref()
                    .map_or((false, [0, 0], Vec::new()), |r| (true, r.size, r.counts.clone()))
            })
            .collect()
    };
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.score
            .partial_cmp(&pa.score)
            .unwrap_or(Ordering::Equal)
            .then(pa.video_id.cmp(&pb.video_id))
            .then(pa.category_id.cmp(&pb.category_id))
            .then_with(|| content(pa).cmp(&content(pb)))
    });
    idx
}

/// Greedy matching at one threshold. `dets` are in rank order; `ious[d][g]`
/// is against the truths of the same video. Returns the TP flag per detection.
fn greedy_match(
    dets: &[&Detection],
    truths: &HashMap<u64, Vec<Truth>>,
    ious: &[Vec<f64>],
    threshold: f64,
) -> Vec<bool> {
    let mut taken: HashMap<u64, Vec<bool>> = truths.iter().map(|(v, t)| (*v, vec![false; t.len()])).collect();
    dets.iter()
        .zip(ious)
        .map(|(d, row)| {
            let Some(used) = taken.get_mut(&d.video) else {
                return false;
            };
            let ts = &truths[&d.video];
            let mut best: Option<usize> = None;
            for (g, &iou) in row.iter().enumerate() {
                if used[g] || iou < threshold {
                    continue;
                }
                best = match best {
                    Some(b) if row[b] > iou || (row[b] == iou && ts[b].id <= ts[g].id) => Some(b),
                    _ => Some(g),
                };
            }
            if let Some(g) = best {
                used[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Area under the 101-point interpolated precision-recall curve.
fn interpolated_ap(tp: &[bool], positives: usize) -> f64 {
    if positives == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        precision.push(t as f64 / (t + f) as f64);
        recall.push(t as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let level = r as f64 / (RECALL_POINTS - 1) as f64;
            recall.iter().position(|&x| x >= level).map_or(0.0, |i| precision[i])
        })
        .sum();
    sum / RECALL_POINTS as f64
}

/// Keeps the `k` best-ranked detections of every video.
fn cap_per_video<'a>(dets: &[&'a Detection], k: usize) -> Vec<&'a Detection> {
    let mut seen: HashMap<u64, usize> = HashMap::new();
    dets.iter()
        .filter(|d| {
            let c = seen.entry(d.video).or_default();
            *c += 1;
            *c <= k
        })
        .copied()
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn evaluate_category(
    category_id: u64,
    name: &str,
    dets: &[&Detection],
    truths: &HashMap<u64, Vec<Truth>>,
) -> Result<CategoryResult, EvalError> {
    let positives: usize = truths.values().map(|t| t.len()).sum();
    let iou_rows = |ds: &[&Detection]| -> Result<Vec<Vec<f64>>, EvalError> {
        ds.iter()
            .map(|d| {
                truths.get(&d.video).map_or(Ok(Vec::new()), |ts| {
                    ts.iter().map(|t| st_iou(&d.masks, &t.masks)).collect()
                })
            })
            .collect()
    };
    let ap_dets = cap_per_video(dets, AP_MAX_DETECTIONS);
    let ap_ious = iou_rows(&ap_dets)?;
    let aps: Vec<f64> = IOU_THRESHOLDS
        .iter()
        .map(|&th| interpolated_ap(&greedy_match(&ap_dets, truths, &ap_ious, th as f64 / 100.0), positives))
        .collect();
    let recall_at = |k: usize| -> Result<f64, EvalError> {
        let ds = cap_per_video(dets, k);
        let ious = iou_rows(&ds)?;
        let r: Vec<f64> = IOU_THRESHOLDS
            .iter()
            .map(|&th| {
                greedy_match(&ds, truths, &ious, th as f64 / 100.0)
                    .iter()
                    .filter(|&&x| x)
                    .count() as f64
                    / positives as f64
            })
            .collect();
        Ok(mean(&r))
    };
    Ok(CategoryResult {
        category_id,
        name: name.to_string(),
        ap: mean(&aps),
        ap50: aps[0],
        ap75: aps[5],
        ar1: recall_at(1)?,
        ar10: recall_at(10)?,
    })
}

/// AP and AR of `preds` against `gt`, averaged over categories that have
/// ground truth. Categories are evaluated in parallel.
pub fn evaluate(preds: &[Prediction], gt: &Dataset) -> Result<EvalResult, EvalError> {
    let videos: HashMap<u64, _> = gt.videos.iter().map(|v| (v.id, v)).collect();
    let order = rank(preds);
    let mut dets: HashMap<u64, Vec<Detection>> = HashMap::new();
    for (key, &i) in order.iter().enumerate() {
        let p = &preds[i];
        if gt.class_index(p.category_id).is_none() {
            return Err(EvalError::UnknownCategory {
                index: i,
                id: p.category_id,
            });
        }
        let v = videos.get(&p.video_id).ok_or(EvalError::UnknownVideo {
            index: i,
            id: p.video_id,
        })?;
        if p.segmentations.len() > v.length {
            return Err(schema(
                format!("predictions[{i}].segmentations"),
                format!("{} frames for a {}-frame video", p.segmentations.len(), v.length),
            ));
        }
        let mut frames = Vec::with_capacity(v.length);
        for (t, s) in p.segmentations.iter().enumerate() {
            let m = s
                .as_ref()
                .map(rle_decode)
                .transpose()
                .map_err(|e| schema(format!("predictions[{i}].segmentations[{t}]"), e.to_string()))?;
            if let Some(m) = &m {
                if m.dims() != (v.height, v.width) {
                    return Err(schema(
                        format!("predictions[{i}].segmentations[{t}].size"),
                        format!("{:?} does not match video {}x{}", m.dims(), v.height, v.width),
                    ));
                }
            }
            frames.push(m);
        }
        frames.resize(v.length, None);
        dets.entry(p.category_id).or_default().push(Detection {
            video: p.video_id,
            score: p.score,
            key,
            masks: MaskSeq::new(v.height, v.width, frames)?,
        });
    }
    let mut truths: HashMap<u64, HashMap<u64, Vec<Truth>>> = HashMap::new();
    for a in &gt.annotations {
        let v = videos[&a.video_id];
        let frames = a
            .segmentations
            .iter()
            .map(|s| s.as_ref().map(rle_decode).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        truths
            .entry(a.category_id)
            .or_default()
            .entry(a.video_id)
            .or_default()
            .push(Truth {
                id: a.id,
                masks: MaskSeq::new(v.height, v.width, frames)?,
            });
    }
    let empty = Vec::new();
    let per_category = gt
        .categories
        .par_iter()
        .filter(|c| truths.contains_key(&c.id))
        .map(|c| {
            let ds: Vec<&Detection> = dets.get(&c.id).unwrap_or(&empty).iter().collect();
            debug_assert!(ds.windows(2).all(|w| w[0].key < w[1].key && w[0].score >= w[1].score));
            evaluate_category(c.id, &c.name, &ds, &truths[&c.id])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let field = |f: fn(&CategoryResult) -> f64| mean(&per_category.iter().map(f).collect::<Vec<_>>());
    Ok(EvalResult {
        ap: field(|c| c.ap),
        ap50: field(|c| c.ap50),
        ap75: field(|c| c.ap75),
        ar1: field(|c| c.ar1),
        ar10: field(|c| c.ar10),
        per_category,
    })
}

/// Ground truth rewritten as score-1 predictions.
pub fn ground_truth_as_predictions(gt: &Dataset) -> Vec<Prediction> {
    gt.annotations
        .iter()
        .map(|a| Prediction {
            video_id: a.video_id,
            category_id: a.category_id,
            score: 1.0,
            segmentations: a.segmentations.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskops::{rle_encode, Rle};
    use crate::vidgen::{AnnotationRecord, CategoryRecord, VideoRecord};
    use proptest::prelude::*;

    fn seq(h: usize, w: usize, frames: &[Option<&[u8]>]) -> MaskSeq {
        let fs = frames
            .iter()
            .map(|f| f.map(|d| Mask::from_vec(h, w, d.iter().map(|&v| v as f64).collect())))
            .collect();
        MaskSeq::new(h, w, fs).unwrap()
    }

    #[test]
    fn st_iou_examples() {
        let a = seq(2, 2, &[Some(&[1, 1, 0, 0]), Some(&[0, 1, 0, 0])]);
        assert_eq!(st_iou(&a, &a).unwrap(), 1.0);
        let empty = seq(2, 2, &[None, Some(&[0, 0, 0, 0])]);
        assert_eq!(st_iou(&empty, &a).unwrap(), 0.0);
        assert_eq!(st_iou(&empty, &empty).unwrap(), 1.0);
        // frame 1: |∩| = 2, |∪| = 4; frame 2: |∩| = 0, |∪| = 2
        let p = seq(
            2,
            4,
            &[Some(&[1, 1, 1, 0, 0, 0, 0, 0]), Some(&[0, 0, 0, 0, 1, 0, 0, 0])],
        );
        let g = seq(
            2,
            4,
            &[Some(&[0, 1, 1, 1, 0, 0, 0, 0]), Some(&[0, 0, 0, 0, 0, 1, 0, 0])],
        );
        assert_eq!(st_iou(&p, &g).unwrap(), 1.0 / 3.0);
        let short = seq(2, 4, &[Some(&[1, 1, 1, 0, 0, 0, 0, 0])]);
        assert_eq!(st_iou(&short, &g).unwrap(), 2.0 / 5.0);
        assert!(matches!(st_iou(&a, &g), Err(EvalError::Resolution { .. })));
    }

    type Seq = Vec<Option<Vec<u8>>>;

    fn arb_seq() -> impl Strategy<Value = (Seq, Seq)> {
        let frame = proptest::option::of(proptest::collection::vec(0u8..2, 9));
        (
            proptest::collection::vec(frame.clone(), 3),
            proptest::collection::vec(frame, 3),
        )
    }

    fn build(f: &[Option<Vec<u8>>]) -> MaskSeq {
        let v: Vec<Option<&[u8]>> = f.iter().map(|x| x.as_deref()).collect();
        seq(3, 3, &v)
    }

    proptest! {
        #[test]
        fn st_iou_is_symmetric_and_bounded((a, b) in arb_seq()) {
            let (x, y) = (build(&a), build(&b));
            let v = st_iou(&x, &y).unwrap();
            prop_assert_eq!(v, st_iou(&y, &x).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn adding_correct_overlap_never_lowers_st_iou((a, b) in arb_seq(), t in 0usize..3, px in 0usize..9) {
            let (x, y) = (build(&a), build(&b));
            let before = st_iou(&x, &y).unwrap();
            // set pixel px on frame t in both sequences
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            for s in [&mut a2, &mut b2] {
                let f = s[t].get_or_insert_with(|| vec![0; 9]);
                f[px] = 1;
            }
            let after = st_iou(&build(&a2), &build(&b2)).unwrap();
            prop_assert!(after >= before - 1e-15, "{} -> {}", before, after);
        }
    }

    fn rle(h: usize, w: usize, bits: &[u8]) -> Rle {
        rle_encode(&Mask::from_vec(h, w, bits.iter().map(|&v| v as f64).collect())).unwrap()
    }

    /// One 1×5 two-frame video; GT covers 5 pixels on frame 0.
    fn one_gt() -> Dataset {
        Dataset {
            videos: vec![VideoRecord {
                id: 7,
                width: 5,
                height: 1,
                length: 2,
                file_names: vec!["a".into(), "b".into()],
            }],
            annotations: vec![AnnotationRecord {
                id: 1,
                video_id: 7,
                category_id: 3,
                segmentations: vec![Some(rle(1, 5, &[1, 1, 1, 1, 1])), None],
                bboxes: vec![Some([0.0, 0.0, 5.0, 1.0]), None],
            }],
            categories: vec![CategoryRecord {
                id: 3,
                name: "c".into(),
            }],
        }
    }

    fn pred(bits: &[u8], score: f64) -> Prediction {
        Prediction {
            video_id: 7,
            category_id: 3,
            score,
            segmentations: vec![Some(rle(1, 5, bits)), None],
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = one_gt();
        let r = evaluate(&ground_truth_as_predictions(&gt), &gt).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75, r.ar1, r.ar10), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_score_zero() {
        let r = evaluate(&[], &one_gt()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75, r.ar1, r.ar10), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn single_threshold_band() {
        // st_iou = 3/5 = 0.6 matches at 0.50, 0.55, 0.60 only
        let r = evaluate(&[pred(&[1, 1, 1, 0, 0], 0.9)], &one_gt()).unwrap();
        assert_eq!(r.ap, 3.0 / 10.0);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
        assert_eq!(r.ar1, 3.0 / 10.0);
    }

    #[test]
    fn lower_ranked_duplicate_is_a_false_positive() {
        // perfect mask ranked second behind a 0.6 match: at 0.5 the first takes the GT
        let preds = [pred(&[1, 1, 1, 0, 0], 0.9), pred(&[1, 1, 1, 1, 1], 0.8)];
        let r = evaluate(&preds, &one_gt()).unwrap();
        assert_eq!(r.ap50, 1.0);
        // above 0.6 the perfect one matches at rank 2: precision 1/2 at recall 1
        assert_eq!(r.ap75, 0.5);
        assert_eq!(r.ar1, 3.0 / 10.0);
        assert_eq!(r.ar10, 1.0);
    }

    #[test]
    fn rejects_unknown_ids() {
        let mut p = pred(&[1, 1, 1, 0, 0], 0.9);
        p.category_id = 9;
        assert!(matches!(
            evaluate(&[p], &one_gt()),
            Err(EvalError::UnknownCategory { id: 9, .. })
        ));
        let mut p = pred(&[1, 1, 1, 0, 0], 0.9);
        p.video_id = 1;
        assert!(matches!(
            evaluate(&[p], &one_gt()),
            Err(EvalError::UnknownVideo { id: 1, .. })
        ));
    }

    #[test]
    fn prediction_schema_errors_name_the_field() {
        let e = parse_predictions(r#"[{"video_id":1,"category_id":1,"score":"x","segmentations":[]}]"#).unwrap_err();
        assert!(e.to_string().starts_with("[0].score"), "{e}");
        let ok = parse_predictions(r#"[{"video_id":1,"category_id":1,"score":0.5,"segmentations":[null]}]"#).unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn table_has_the_expected_columns() {
        let t = EvalResult::default().table();
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, TABLE_COLUMNS);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn evaluation_ignores_prediction_order(
            masks in proptest::collection::vec((proptest::collection::vec(0u8..2, 5), 0u8..4), 1..6),
            seed in any::<u64>()
        ) {
            let gt = one_gt();
            let preds: Vec<Prediction> = masks.iter().map(|(m, s)| pred(m, *s as f64 / 4.0)).collect();
            let base = evaluate(&preds, &gt).unwrap();
            let mut shuffled = preds.clone();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
            prop_assert_eq!(evaluate(&shuffled, &gt).unwrap(), base);
        }
    }
}
