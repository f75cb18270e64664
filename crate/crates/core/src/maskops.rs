//! Mask containers, column-major run-length coding, resizing and the two
//! mask loss primitives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{focal_term, FocalParams};

/// Largest mask (in pixels) accepted from external input.
pub const MAX_MASK_PIXELS: usize = 1 << 26;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask value {value} at pixel {index} is not binary")]
    NonBinary { index: usize, value: f64 },
    #[error("run lengths sum to {found} but size {height}x{width} needs {expected}")]
    CountMismatch {
        height: usize,
        width: usize,
        expected: usize,
        found: u64,
    },
    #[error("mask size {height}x{width} exceeds the {MAX_MASK_PIXELS}-pixel limit")]
    TooLarge { height: usize, width: usize },
    #[error("resolution mismatch: {a:?} vs {b:?}")]
    Resolution { a: (usize, usize), b: (usize, usize) },
    #[error("mask sequence frames disagree on resolution")]
    MixedResolution,
}

/// Row-major 2-D mask of probabilities or binary values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of set pixels (sum of values).
    pub fn area(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Thresholds at `t` (strictly greater is foreground).
    pub fn binarize(&self, t: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Tight pixel bounds `(x_min, y_min, x_max, y_max)` (inclusive) of nonzero pixels.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) > 0.0 {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    fn check_same(&self, other: &Mask) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::Resolution {
                a: self.dims(),
                b: other.dims(),
            });
        }
        Ok(())
    }
}

/// Column-major run-length record; runs alternate starting with zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &Mask) -> Result<Rle, MaskError> {
    let (h, w) = mask.dims();
    let mut counts = Vec::new();
    let mut current = 0.0;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != 0.0 && v != 1.0 {
                return Err(MaskError::NonBinary {
                    index: y * w + x,
                    value: v,
                });
            }
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Ok(Rle { size: [h, w], counts })
}

pub fn rle_decode(rle: &Rle) -> Result<Mask, MaskError> {
    let [h, w] = rle.size;
    let expected = h
        .checked_mul(w)
        .filter(|&n| n <= MAX_MASK_PIXELS)
        .ok_or(MaskError::TooLarge { height: h, width: w })?;
    let found = rle
        .counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .unwrap_or(u64::MAX);
    if found != expected as u64 {
        return Err(MaskError::CountMismatch {
            height: h,
            width: w,
            expected,
            found,
        });
    }
    let mut mask = Mask::zeros(h, w);
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let c = c as usize;
        if i % 2 == 1 {
            for p in pos..pos + c {
                mask.set(p % h, p / h, 1.0);
            }
        }
        pos += c;
    }
    Ok(mask)
}

/// `1 - (2 Σ p·g + 1) / (Σ p + Σ g + 1)`.
pub fn dice_loss(pred: &Mask, gt: &Mask) -> Result<f64, MaskError> {
    pred.check_same(gt)?;
    let inter: f64 = pred.data.iter().zip(&gt.data).map(|(p, g)| p * g).sum();
    Ok(1.0 - (2.0 * inter + 1.0) / (pred.area() + gt.area() + 1.0))
}

/// Mean per-pixel sigmoid focal loss of logits against a binary mask.
pub fn focal_loss(logits: &Mask, gt: &Mask, params: FocalParams) -> Result<f64, MaskError> {
    logits.check_same(gt)?;
    let n = logits.data.len().max(1) as f64;
    Ok(logits
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&l, &g)| focal_term(l, g, params).0)
        .sum::<f64>()
        / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Resizes to `(height, width)`; bilinear for probabilities, nearest for binary masks.
pub fn resize_mask(mask: &Mask, height: usize, width: usize, mode: ResizeMode) -> Mask {
    assert!(height > 0 && width > 0, "target resolution must be positive");
    if mask.dims() == (height, width) {
        return mask.clone();
    }
    match mode {
        ResizeMode::Nearest => {
            let sy = mask.height as f64 / height as f64;
            let sx = mask.width as f64 / width as f64;
            Mask::from_fn(height, width, |y, x| {
                let iy = (((y as f64 + 0.5) * sy) as usize).min(mask.height - 1);
                let ix = (((x as f64 + 0.5) * sx) as usize).min(mask.width - 1);
                mask.get(iy, ix)
            })
        }
        ResizeMode::Bilinear => {
            let ty = crate::geometry::resize_taps(mask.height, height);
            let tx = crate::geometry::resize_taps(mask.width, width);
            Mask::from_fn(height, width, |y, x| {
                let (y0, y1, fy) = ty[y];
                let (x0, x1, fx) = tx[x];
                (1.0 - fy) * ((1.0 - fx) * mask.get(y0, x0) + fx * mask.get(y0, x1))
                    + fy * ((1.0 - fx) * mask.get(y1, x0) + fx * mask.get(y1, x1))
            })
        }
    }
}

/// Per-frame masks of one instance; `None` marks a frame where it is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSeq {
    height: usize,
    width: usize,
    frames: Vec<Option<Mask>>,
}

impl MaskSeq {
    pub fn new(height: usize, width: usize, frames: Vec<Option<Mask>>) -> Result<Self, MaskError> {
        if frames.iter().flatten().any(|m| m.dims() != (height, width)) {
            return Err(MaskError::MixedResolution);
        }
        Ok(Self { height, width, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn frame(&self, t: usize) -> Option<&Mask> {
        self.frames.get(t).and_then(|m| m.as_ref())
    }

    pub fn is_present(&self, t: usize) -> bool {
        self.frame(t).is_some()
    }

    pub fn frames(&self) -> &[Option<Mask>] {
        &self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_examples() {
        assert_eq!(rle_encode(&Mask::zeros(2, 2)).unwrap().counts, vec![4]);
        assert_eq!(
            rle_encode(&Mask::from_vec(2, 2, vec![1.0; 4])).unwrap().counts,
            vec![0, 4]
        );
        let top_left = Mask::from_vec(2, 2, vec![1., 0., 0., 0.]);
        assert_eq!(rle_encode(&top_left).unwrap().counts, vec![0, 1, 3]);
        // column-major: (row 1, col 0) is the second pixel visited
        let below = Mask::from_vec(2, 2, vec![0., 0., 1., 0.]);
        assert_eq!(rle_encode(&below).unwrap().counts, vec![1, 1, 2]);
    }

    #[test]
    fn rle_decode_examples() {
        let z = rle_decode(&Rle {
            size: [2, 2],
            counts: vec![4],
        })
        .unwrap();
        assert_eq!(z, Mask::zeros(2, 2));
        let o = rle_decode(&Rle {
            size: [2, 2],
            counts: vec![0, 4],
        })
        .unwrap();
        assert_eq!(o.data, vec![1.0; 4]);
    }

    #[test]
    fn rle_rejects_bad_input() {
        assert!(matches!(
            rle_encode(&Mask::from_vec(1, 2, vec![0.5, 1.0])),
            Err(MaskError::NonBinary { .. })
        ));
        assert!(matches!(
            rle_decode(&Rle {
                size: [2, 2],
                counts: vec![1, 2]
            }),
            Err(MaskError::CountMismatch {
                expected: 4,
                found: 3,
                ..
            })
        ));
        assert!(matches!(
            rle_decode(&Rle {
                size: [usize::MAX, 2],
                counts: vec![]
            }),
            Err(MaskError::TooLarge { .. })
        ));
        assert!(rle_decode(&Rle {
            size: [1, 1],
            counts: vec![u64::MAX, 2]
        })
        .is_err());
    }

    #[test]
    fn rle_json_shape() {
        let rle = rle_encode(&Mask::from_vec(2, 2, vec![1., 0., 0., 0.])).unwrap();
        assert_eq!(
            serde_json::to_string(&rle).unwrap(),
            r#"{"size":[2,2],"counts":[0,1,3]}"#
        );
    }

    #[test]
    fn dice_examples() {
        let m = Mask::from_vec(2, 2, vec![1., 0., 1., 1.]);
        assert_eq!(dice_loss(&m, &m).unwrap(), 0.0);
        assert_eq!(dice_loss(&Mask::zeros(2, 2), &Mask::zeros(2, 2)).unwrap(), 0.0);
        let ones = Mask::from_vec(2, 2, vec![1.0; 4]);
        assert!((dice_loss(&ones, &Mask::zeros(2, 2)).unwrap() - 0.8).abs() < 1e-15);
        assert!(dice_loss(&ones, &Mask::zeros(3, 2)).is_err());
    }

    #[test]
    fn focal_examples() {
        let fp = FocalParams::default();
        let one = Mask::from_vec(1, 1, vec![1.0]);
        let l = focal_loss(&Mask::from_vec(1, 1, vec![0.0]), &one, fp).unwrap();
        assert!((l - 0.04332169878499658).abs() < 1e-12);
        let gt = Mask::from_vec(1, 2, vec![1.0, 0.0]);
        let perfect = Mask::from_vec(1, 2, vec![60.0, -60.0]);
        assert!(focal_loss(&perfect, &gt, fp).unwrap() < 1e-50);
        assert!(focal_loss(&perfect, &Mask::zeros(2, 1), fp).is_err());
    }

    #[test]
    fn focal_without_modulation_is_bce() {
        // independent BCE: -(g ln σ(x) + (1-g) ln(1-σ(x)))
        let bce = |x: f64, g: f64| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        };
        let logits = Mask::from_vec(2, 3, vec![0.3, -1.2, 2.5, -0.1, 0.9, -3.0]);
        let gt = Mask::from_vec(2, 3, vec![1., 0., 1., 1., 0., 0.]);
        let want: f64 = logits.data.iter().zip(&gt.data).map(|(&x, &g)| bce(x, g)).sum::<f64>() / 6.0;
        let got = focal_loss(
            &logits,
            &gt,
            FocalParams {
                alpha: None,
                gamma: 0.0,
            },
        )
        .unwrap();
        assert!((got - want).abs() < 1e-12);
        // all-positive target with alpha = 1 is the same reduction
        let pos = Mask::from_vec(2, 3, vec![1.0; 6]);
        let want: f64 = logits.data.iter().map(|&x| bce(x, 1.0)).sum::<f64>() / 6.0;
        let got = focal_loss(
            &logits,
            &pos,
            FocalParams {
                alpha: Some(1.0),
                gamma: 0.0,
            },
        )
        .unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn resize_examples() {
        let m = Mask::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(resize_mask(&m, 2, 2, ResizeMode::Bilinear), m);
        let ones = Mask::from_vec(4, 4, vec![1.0; 16]);
        let up = resize_mask(&ones, 8, 8, ResizeMode::Bilinear);
        assert!(up.data.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let checker = Mask::from_vec(2, 2, vec![1., 0., 0., 1.]);
        let up = resize_mask(&checker, 4, 4, ResizeMode::Nearest);
        let want = Mask::from_fn(4, 4, |y, x| checker.get(y / 2, x / 2));
        assert_eq!(up, want);
    }

    #[test]
    fn mask_seq_rejects_mixed_resolution() {
        assert!(MaskSeq::new(2, 2, vec![Some(Mask::zeros(2, 2)), None]).is_ok());
        assert_eq!(
            MaskSeq::new(2, 2, vec![Some(Mask::zeros(2, 3))]),
            Err(MaskError::MixedResolution)
        );
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop::bool::ANY, h * w)
                .prop_map(move |bits| Mask::from_vec(h, w, bits.into_iter().map(|b| b as u8 as f64).collect()))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn rle_round_trip(m in arb_mask()) {
            let rle = rle_encode(&m).unwrap();
            prop_assert_eq!(rle.counts.iter().sum::<u64>() as usize, m.height * m.width);
            prop_assert_eq!(rle_decode(&rle).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn dice_symmetric_for_binary(a in arb_mask(), seed in 0u64..1000) {
            let b = Mask::from_fn(a.height, a.width, |y, x| (y * 7 + x * 3 + seed as usize).is_multiple_of(3) as u8 as f64);
            prop_assert!((dice_loss(&a, &b).unwrap() - dice_loss(&b, &a).unwrap()).abs() < 1e-15);
            let d = dice_loss(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn focal_decreases_as_true_class_gains(x in -8.0..8.0f64, step in 0.01..2.0f64) {
            let fp = FocalParams::default();
            let (pos_lo, _) = focal_term(x, 1.0, fp);
            let (pos_hi, _) = focal_term(x + step, 1.0, fp);
            prop_assert!(pos_lo >= 0.0 && pos_hi <= pos_lo);
            let (neg_lo, _) = focal_term(x, 0.0, fp);
            let (neg_hi, _) = focal_term(x - step, 0.0, fp);
            prop_assert!(neg_hi <= neg_lo);
        }
    }
}
