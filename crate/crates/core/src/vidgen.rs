//! Synthetic moving-shape videos, pseudo videos from still images, and the
//! annotation file format.
//!
//! Files store pixel boxes as top-left `[x, y, w, h]`. In memory boxes are
//! normalized center form.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Box;
use crate::maskops::{rle_decode, rle_encode, Mask, MaskError, Rle};
use crate::matchloss::{AnnotationError, InstanceTrack, VideoAnnotation};
use crate::tensor::Array;

#[derive(Debug, Error)]
pub enum VidgenError {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("video {0} not found")]
    UnknownVideo(u64),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> VidgenError {
    VidgenError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the pixel-space point `(px, py)` lies inside the shape centered
    /// at `(cx, cy)` with extent `(w, h)`.
    fn contains(self, px: f64, py: f64, cx: f64, cy: f64, w: f64, h: f64) -> bool {
        let (dx, dy) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= 1.0,
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            // apex at the top, base at the bottom
            ShapeKind::Triangle => dy <= 1.0 && dx.abs() <= (dy + 1.0) / 2.0,
        }
    }
}

/// One moving object. Positions and sizes are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Class index in `0..K`.
    pub category: usize,
    pub size: [f64; 2],
    pub color: [f64; 3],
    /// Center on frame 0.
    pub position: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Frames with index `>= exit_after` do not show the object.
    #[serde(default)]
    pub exit_after: Option<usize>,
    /// Frames on which the object is hidden.
    #[serde(default)]
    pub hidden_frames: Vec<usize>,
}

impl ObjectSpec {
    fn drawn_on(&self, t: usize) -> bool {
        self.exit_after.is_none_or(|e| t < e) && !self.hidden_frames.contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: [f64; 3],
    /// Amplitude of uniform per-pixel background noise.
    pub noise: f64,
    pub seed: u64,
    /// Painted in order; later objects occlude earlier ones.
    pub objects: Vec<ObjectSpec>,
}

/// Frames `[T, 3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Array,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.frames.dim(2), self.frames.dim(3))
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let (h, w) = self.size();
        &self.frames.data()[t * 3 * h * w..][..3 * h * w]
    }

    pub fn select_frames(&self, frames: &[usize]) -> VideoClip {
        let (h, w) = self.size();
        let data = frames.iter().flat_map(|&t| self.frame(t).iter().copied()).collect();
        VideoClip {
            frames: Array::from_vec(&[frames.len(), 3, h, w], data),
        }
    }

    /// First `t` frames, repeating the clip cyclically when it is shorter.
    pub fn cycled(&self, t: usize) -> VideoClip {
        let idx: Vec<usize> = (0..t).map(|i| i % self.len()).collect();
        self.select_frames(&idx)
    }
}

/// Normalized center box of the tight bounds of a nonempty mask.
pub fn mask_box(mask: &Mask) -> Option<Box> {
    let (h, w) = mask.dims();
    mask.bounds()
        .map(|(x0, y0, x1, y1)| pixel_to_box([x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64], w, h))
}

/// `[x, y, w, h]` pixels to normalized center form.
pub fn pixel_to_box(b: [f64; 4], width: usize, height: usize) -> Box {
    let (fw, fh) = (width as f64, height as f64);
    Box::new((b[0] + b[2] / 2.0) / fw, (b[1] + b[3] / 2.0) / fh, b[2] / fw, b[3] / fh)
}

/// Normalized center form to `[x, y, w, h]` pixels.
pub fn box_to_pixel(b: &Box, width: usize, height: usize) -> [f64; 4] {
    let (fw, fh) = (width as f64, height as f64);
    [(b.cx - b.w / 2.0) * fw, (b.cy - b.h / 2.0) * fh, b.w * fw, b.h * fh]
}

fn tight_pixel_box(mask: &Mask) -> Option<[f64; 4]> {
    mask.bounds()
        .map(|(x0, y0, x1, y1)| [x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64])
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Builds the annotation from per-frame visible masks `[object][frame]`,
/// dropping objects never visible.
fn annotation_from_masks(
    frames: usize,
    height: usize,
    width: usize,
    classes: &[usize],
    masks: Vec<Vec<Mask>>,
) -> Result<VideoAnnotation, AnnotationError> {
    let instances = classes
        .iter()
        .zip(masks)
        .filter_map(|(&class, ms)| {
            let boxes: Vec<Option<Box>> = ms.iter().map(mask_box).collect();
            if boxes.iter().all(|b| b.is_none()) {
                return None;
            }
            let masks = ms.into_iter().zip(&boxes).map(|(m, b)| b.map(|_| m)).collect();
            Some(InstanceTrack { class, boxes, masks })
        })
        .collect();
    VideoAnnotation::new(frames, height, width, instances)
}

/// Renders a scene. Masks are exact (no anti-aliasing) and cover the visible
/// part of each object; objects fully off-canvas or fully occluded are absent.
pub fn generate_video(spec: &SceneSpec) -> Result<(VideoClip, VideoAnnotation), VidgenError> {
    let (h, w, t) = (spec.height, spec.width, spec.frames);
    if h == 0 || w == 0 || t == 0 {
        return Err(VidgenError::Scene(format!("empty canvas {w}x{h} with {t} frames")));
    }
    for (i, o) in spec.objects.iter().enumerate() {
        if !(o.size[0] > 0.0 && o.size[1] > 0.0) || o.position.iter().chain(&o.velocity).any(|v| !v.is_finite()) {
            return Err(VidgenError::Scene(format!("object {i} has invalid geometry")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hw = h * w;
    let mut data = Vec::with_capacity(t * 3 * hw);
    let mut masks = vec![Vec::with_capacity(t); spec.objects.len()];
    for ti in 0..t {
        let mut owner: Vec<Option<usize>> = vec![None; hw];
        for (i, o) in spec.objects.iter().enumerate() {
            if !o.drawn_on(ti) {
                continue;
            }
            let cx = o.position[0] + o.velocity[0] * ti as f64;
            let cy = o.position[1] + o.velocity[1] * ti as f64;
            let x_lo = (cx - o.size[0]).floor().max(0.0) as usize;
            let y_lo = (cy - o.size[1]).floor().max(0.0) as usize;
            let x_hi = ((cx + o.size[0]).ceil().max(0.0) as usize).min(w);
            let y_hi = ((cy + o.size[1]).ceil().max(0.0) as usize).min(h);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if o.shape
                        .contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, o.size[0], o.size[1])
                    {
                        owner[y * w + x] = Some(i);
                    }
                }
            }
        }
        let mut frame = vec![0.0; 3 * hw];
        for p in 0..hw {
            let n = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            for c in 0..3 {
                frame[c * hw + p] = quantize(match owner[p] {
                    Some(i) => spec.objects[i].color[c],
                    None => spec.background[c] + n,
                });
            }
        }
        data.extend(frame);
        for (i, m) in masks.iter_mut().enumerate() {
            m.push(Mask::from_vec(
                h,
                w,
                owner.iter().map(|o| (*o == Some(i)) as u8 as f64).collect(),
            ));
        }
    }
    let classes: Vec<usize> = spec.objects.iter().map(|o| o.category).collect();
    let ann = annotation_from_masks(t, h, w, &classes, masks)?;
    Ok((
        VideoClip {
            frames: Array::from_vec(&[t, 3, h, w], data),
        },
        ann,
    ))
}

/// Random scene family used for training and benchmarks. The category of an
/// object is the index of its shape kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSampler {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent as a fraction of the canvas side.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest speed as a fraction of the canvas side per frame.
    pub max_speed: f64,
    /// Probability that an object leaves the clip before its end.
    pub exit_probability: f64,
    /// Probability that an object is hidden on any given frame after the first.
    pub hide_probability: f64,
    pub noise: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            frames: 5,
            min_objects: 2,
            max_objects: 3,
            min_size: 0.16,
            max_size: 0.3,
            max_speed: 0.03,
            exit_probability: 0.0,
            hide_probability: 0.0,
            noise: 0.03,
        }
    }
}

impl SceneSampler {
    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fw, fh) = (self.width as f64, self.height as f64);
        let side = fw.min(fh);
        let count = rng.random_range(self.min_objects..=self.max_objects.max(self.min_objects));
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
        for _ in 0..count {
            let shape = ShapeKind::ALL[rng.random_range(0..3)];
            let s = side * rng.random_range(self.min_size..=self.max_size);
            let size = if shape == ShapeKind::Disk {
                [s, s]
            } else {
                [s, s * rng.random_range(0.7..=1.3)]
            };
            // keep centers apart so frame 0 shows every object
            let mut position = [fw / 2.0, fh / 2.0];
            for _ in 0..50 {
                position = [
                    rng.random_range(size[0] / 2.0..=fw - size[0] / 2.0),
                    rng.random_range(size[1] / 2.0..=fh - size[1] / 2.0),
                ];
                let clear = objects.iter().all(|o| {
                    let d = ((o.position[0] - position[0]).powi(2) + (o.position[1] - position[1]).powi(2)).sqrt();
                    d >= 0.6 * (o.size[0].max(o.size[1]) + size[0].max(size[1]))
                });
                if clear {
                    break;
                }
            }
            let speed = self.max_speed * side;
            let velocity = [rng.random_range(-speed..=speed), rng.random_range(-speed..=speed)];
            let color = [
                rng.random_range(0.35..=1.0),
                rng.random_range(0.35..=1.0),
                rng.random_range(0.35..=1.0),
            ];
            let exit_after = (self.frames > 1 && rng.random_bool(self.exit_probability.clamp(0.0, 1.0)))
                .then(|| rng.random_range(1..self.frames));
            let hidden_frames = (1..self.frames)
                .filter(|_| rng.random_bool(self.hide_probability.clamp(0.0, 1.0)))
                .collect();
            objects.push(ObjectSpec {
                shape,
                category: shape as usize,
                size,
                color,
                position,
                velocity,
                exit_after,
                hidden_frames,
            });
        }
        SceneSpec {
            width: self.width,
            height: self.height,
            frames: self.frames,
            background: [
                rng.random_range(0.0..=0.2),
                rng.random_range(0.0..=0.2),
                rng.random_range(0.0..=0.2),
            ],
            noise: self.noise,
            seed,
            objects,
        }
    }
}

/// One generated video with its identifier.
#[derive(Clone, Debug)]
pub struct LabeledVideo {
    pub id: u64,
    pub clip: VideoClip,
    pub annotation: VideoAnnotation,
}

/// Generates `count` videos with ids `1..=count`; video `i` uses seed
/// `seed * 1_000_003 + i`. Videos are rendered in parallel.
pub fn generate_dataset(sampler: &SceneSampler, count: usize, seed: u64) -> Result<Vec<LabeledVideo>, VidgenError> {
    (1..=count as u64)
        .into_par_iter()
        .map(|id| {
            let spec = sampler.sample(seed.wrapping_mul(1_000_003).wrapping_add(id));
            let (clip, annotation) = generate_video(&spec)?;
            Ok(LabeledVideo { id, clip, annotation })
        })
        .collect()
}

/// Rotates `[3, H, W]` image planes and masks by `deg` degrees about the image
/// center using nearest-neighbour inverse mapping; uncovered pixels are zero.
fn rotate_nearest(planes: &[f64], channels: usize, h: usize, w: usize, deg: f64) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = vec![0.0; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            if sx < 0.0 || sy < 0.0 {
                continue;
            }
            let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
            if ix >= w || iy >= h {
                continue;
            }
            for ch in 0..channels {
                out[(ch * h + y) * w + x] = planes[(ch * h + iy) * w + ix];
            }
        }
    }
    out
}

/// Builds a `frames`-long clip from one annotated image. Frame 0 is the
/// original; later frames are rotated by an angle drawn from
/// `[-max_rotation_deg, max_rotation_deg]`. Boxes are the tight hulls of the
/// rotated masks. Instances with empty masks are dropped.
pub fn pseudo_video(
    image: &Array,
    instances: &[(usize, Mask)],
    frames: usize,
    max_rotation_deg: f64,
    rng: &mut impl Rng,
) -> Result<(VideoClip, VideoAnnotation), VidgenError> {
    let angles: Vec<f64> = (0..frames)
        .map(|t| {
            if t == 0 || max_rotation_deg == 0.0 {
                0.0
            } else {
                rng.random_range(-max_rotation_deg..=max_rotation_deg)
            }
        })
        .collect();
    pseudo_video_with_angles(image, instances, &angles).map(|(c, a, _)| (c, a))
}

/// [`pseudo_video`] with explicit per-frame angles in degrees.
pub fn pseudo_video_with_angles(
    image: &Array,
    instances: &[(usize, Mask)],
    angles: &[f64],
) -> Result<(VideoClip, VideoAnnotation, Vec<f64>), VidgenError> {
    let (h, w) = (image.dim(1), image.dim(2));
    for (i, (_, m)) in instances.iter().enumerate() {
        if m.dims() != (h, w) {
            return Err(VidgenError::Scene(format!(
                "instance {i} mask is {:?}, image is {:?}",
                m.dims(),
                (h, w)
            )));
        }
    }
    let kept: Vec<&(usize, Mask)> = instances.iter().filter(|(_, m)| m.area() > 0.0).collect();
    let mut data = Vec::with_capacity(angles.len() * 3 * h * w);
    let mut masks = vec![Vec::with_capacity(angles.len()); kept.len()];
    for &a in angles {
        if a == 0.0 {
            data.extend_from_slice(image.data());
        } else {
            data.extend(rotate_nearest(image.data(), 3, h, w, a));
        }
        for (i, (_, m)) in kept.iter().enumerate() {
            let r = if a == 0.0 {
                m.clone()
            } else {
                Mask::from_vec(h, w, rotate_nearest(&m.data, 1, h, w, a))
            };
            masks[i].push(r);
        }
    }
    let classes: Vec<usize> = kept.iter().map(|(c, _)| *c).collect();
    let ann = annotation_from_masks(angles.len(), h, w, &classes, masks)?;
    Ok((
        VideoClip {
            frames: Array::from_vec(&[angles.len(), 3, h, w], data),
        },
        ann,
        angles.to_vec(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub file_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub video_id: u64,
    pub category_id: u64,
    pub segmentations: Vec<Option<Rle>>,
    /// Top-left `[x, y, w, h]` in pixels.
    pub bboxes: Vec<Option<[f64; 4]>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

/// Annotation file contents.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

/// Category records for the synthetic shapes, ids `1..=3`.
pub fn shape_categories() -> Vec<CategoryRecord> {
    ShapeKind::ALL
        .iter()
        .enumerate()
        .map(|(i, s)| CategoryRecord {
            id: i as u64 + 1,
            name: s.name().to_string(),
        })
        .collect()
}

/// Relative path of frame `t` of video `id`.
pub fn frame_file_name(id: u64, t: usize) -> String {
    format!("video_{id:05}/{t:05}.png")
}

impl Dataset {
    /// Parses and validates a dataset. Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, VidgenError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let ds: Dataset = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(path, e.into_inner().to_string())
        })?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn validate(&self) -> Result<(), VidgenError> {
        let mut categories = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !categories.insert(c.id) {
                return Err(schema(
                    format!("categories[{i}].id"),
                    format!("duplicate category id {}", c.id),
                ));
            }
        }
        let mut videos = HashMap::new();
        for (i, v) in self.videos.iter().enumerate() {
            let p = format!("videos[{i}]");
            if videos.insert(v.id, v).is_some() {
                return Err(schema(format!("{p}.id"), format!("duplicate video id {}", v.id)));
            }
            if v.width == 0 || v.height == 0 {
                return Err(schema(format!("{p}.width"), "frame size must be positive"));
            }
            if v.length == 0 {
                return Err(schema(format!("{p}.length"), "video must have at least one frame"));
            }
            if v.file_names.len() != v.length {
                return Err(schema(
                    format!("{p}.file_names"),
                    format!("{} names for {} frames", v.file_names.len(), v.length),
                ));
            }
        }
        let mut ids = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            let p = format!("annotations[{i}]");
            if !ids.insert(a.id) {
                return Err(schema(format!("{p}.id"), format!("duplicate annotation id {}", a.id)));
            }
            let v = videos
                .get(&a.video_id)
                .ok_or_else(|| schema(format!("{p}.video_id"), format!("unknown video {}", a.video_id)))?;
            if !categories.contains(&a.category_id) {
                return Err(schema(
                    format!("{p}.category_id"),
                    format!("unknown category {}", a.category_id),
                ));
            }
            if a.segmentations.len() != v.length {
                return Err(schema(
                    format!("{p}.segmentations"),
                    format!("{} entries for {} frames", a.segmentations.len(), v.length),
                ));
            }
            if a.bboxes.len() != v.length {
                return Err(schema(
                    format!("{p}.bboxes"),
                    format!("{} entries for {} frames", a.bboxes.len(), v.length),
                ));
            }
            for (t, (s, b)) in a.segmentations.iter().zip(&a.bboxes).enumerate() {
                if s.is_some() != b.is_some() {
                    return Err(schema(
                        format!("{p}.bboxes[{t}]"),
                        "box and segmentation must be null together",
                    ));
                }
                if let Some(b) = b {
                    if b.iter().any(|x| !x.is_finite()) || b[2] < 0.0 || b[3] < 0.0 {
                        return Err(schema(
                            format!("{p}.bboxes[{t}]"),
                            "box must be finite with non-negative size",
                        ));
                    }
                }
                if let Some(s) = s {
                    if s.size != [v.height, v.width] {
                        return Err(schema(
                            format!("{p}.segmentations[{t}].size"),
                            format!("{:?} does not match video {}x{}", s.size, v.height, v.width),
                        ));
                    }
                    let total = s.counts.iter().try_fold(0u64, |acc, &c| acc.checked_add(c));
                    if total != Some((v.height * v.width) as u64) {
                        return Err(schema(
                            format!("{p}.segmentations[{t}].counts"),
                            "run lengths do not cover the frame",
                        ));
                    }
                }
            }
            if a.bboxes.iter().all(|b| b.is_none()) {
                return Err(schema(format!("{p}.bboxes"), "instance is absent from every frame"));
            }
        }
        Ok(())
    }

    pub fn video(&self, id: u64) -> Result<&VideoRecord, VidgenError> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or(VidgenError::UnknownVideo(id))
    }

    /// Class index of a category id (position in `categories`).
    pub fn class_index(&self, category_id: u64) -> Option<usize> {
        self.categories.iter().position(|c| c.id == category_id)
    }

    /// Decodes the ground truth of one video.
    pub fn video_annotation(&self, video_id: u64) -> Result<VideoAnnotation, VidgenError> {
        let v = self.video(video_id)?;
        let mut instances = Vec::new();
        for (i, a) in self
            .annotations
            .iter()
            .enumerate()
            .filter(|(_, a)| a.video_id == video_id)
        {
            let class = self
                .class_index(a.category_id)
                .ok_or_else(|| schema(format!("annotations[{i}].category_id"), "unknown category"))?;
            let masks = a
                .segmentations
                .iter()
                .map(|s| s.as_ref().map(rle_decode).transpose())
                .collect::<Result<Vec<_>, _>>()?;
            let boxes = a
                .bboxes
                .iter()
                .map(|b| b.map(|b| pixel_to_box(b, v.width, v.height)))
                .collect();
            instances.push(InstanceTrack { class, boxes, masks });
        }
        Ok(VideoAnnotation::new(v.length, v.height, v.width, instances)?)
    }

    /// Records for generated videos; frames are referenced by
    /// [`frame_file_name`].
    pub fn from_videos(videos: &[LabeledVideo], categories: Vec<CategoryRecord>) -> Result<Self, VidgenError> {
        let mut ds = Dataset {
            categories,
            ..Default::default()
        };
        for v in videos {
            let (h, w) = v.clip.size();
            ds.videos.push(VideoRecord {
                id: v.id,
                width: w,
                height: h,
                length: v.clip.len(),
                file_names: (0..v.clip.len()).map(|t| frame_file_name(v.id, t)).collect(),
            });
            for inst in v.annotation.instances() {
                let category_id = ds
                    .categories
                    .get(inst.class)
                    .ok_or_else(|| VidgenError::Scene(format!("class {} has no category record", inst.class)))?
                    .id;
                let segmentations = inst
                    .masks
                    .iter()
                    .map(|m| m.as_ref().map(rle_encode).transpose())
                    .collect::<Result<Vec<_>, _>>()?;
                let bboxes = inst
                    .masks
                    .iter()
                    .map(|m| m.as_ref().and_then(tight_pixel_box))
                    .collect();
                ds.annotations.push(AnnotationRecord {
                    id: ds.annotations.len() as u64 + 1,
                    video_id: v.id,
                    category_id,
                    segmentations,
                    bboxes,
                });
            }
        }
        Ok(ds)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VidgenError + '_ {
    move |source| VidgenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_annotations(path: &Path) -> Result<Dataset, VidgenError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Dataset::from_json(&text)
}

pub fn save_annotations(ds: &Dataset, path: &Path) -> Result<(), VidgenError> {
    ds.validate()?;
    std::fs::write(path, ds.to_json()).map_err(io_err(path))
}

/// Writes `[3, H, W]` frame data as an 8-bit RGB PNG.
pub fn write_frame_png(path: &Path, frame: &[f64], height: usize, width: usize) -> Result<(), VidgenError> {
    let hw = height * width;
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (frame[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save(path).map_err(|source| VidgenError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_frame_png(path: &Path) -> Result<(usize, usize, Vec<f64>), VidgenError> {
    let img = image::open(path)
        .map_err(|source| VidgenError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok((h, w, out))
}

/// Loads the frames of a video record relative to `root`.
pub fn load_clip(root: &Path, video: &VideoRecord) -> Result<VideoClip, VidgenError> {
    let mut data = Vec::with_capacity(video.length * 3 * video.height * video.width);
    for name in &video.file_names {
        let path = root.join(name);
        let (h, w, frame) = read_frame_png(&path)?;
        if (h, w) != (video.height, video.width) {
            return Err(schema(
                path.display().to_string(),
                format!("image is {w}x{h}, record says {}x{}", video.width, video.height),
            ));
        }
        data.extend(frame);
    }
    Ok(VideoClip {
        frames: Array::from_vec(&[video.length, 3, video.height, video.width], data),
    })
}

/// Writes frames as PNGs under `root` and the annotations to
/// `root/annotations.json`.
pub fn write_dataset(
    root: &Path,
    videos: &[LabeledVideo],
    categories: Vec<CategoryRecord>,
) -> Result<Dataset, VidgenError> {
    let ds = Dataset::from_videos(videos, categories)?;
    for (v, rec) in videos.iter().zip(&ds.videos) {
        let (h, w) = v.clip.size();
        for (t, name) in rec.file_names.iter().enumerate() {
            write_frame_png(&root.join(name), v.clip.frame(t), h, w)?;
        }
    }
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    save_annotations(&ds, &root.join("annotations.json"))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn object(shape: ShapeKind, position: [f64; 2], velocity: [f64; 2]) -> ObjectSpec {
        ObjectSpec {
            shape,
            category: shape as usize,
            size: [10.0, 8.0],
            color: [1.0, 0.5, 0.25],
            position,
            velocity,
            exit_after: None,
            hidden_frames: vec![],
        }
    }

    fn scene(objects: Vec<ObjectSpec>) -> SceneSpec {
        SceneSpec {
            width: 32,
            height: 24,
            frames: 5,
            background: [0.1, 0.1, 0.1],
            noise: 0.05,
            seed: 9,
            objects,
        }
    }

    #[test]
    fn static_object_keeps_its_box() {
        let (_, ann) = generate_video(&scene(vec![object(ShapeKind::Rectangle, [12.0, 10.0], [0.0, 0.0])])).unwrap();
        let b = &ann.instances()[0].boxes;
        assert!(b.iter().all(|x| *x == b[0] && x.is_some()));
    }

    #[test]
    fn exit_marks_later_frames_absent() {
        let mut o = object(ShapeKind::Disk, [12.0, 10.0], [1.0, 0.0]);
        o.exit_after = Some(3);
        let (_, ann) = generate_video(&scene(vec![o])).unwrap();
        let present: Vec<bool> = ann.instances()[0].boxes.iter().map(|b| b.is_some()).collect();
        assert_eq!(present, vec![true, true, true, false, false]);
    }

    #[test]
    fn leaving_the_canvas_and_occlusion_mark_absence() {
        // second object moves off the right edge; third hides under the fourth on frame 0
        let mut cover = object(ShapeKind::Rectangle, [6.0, 6.0], [0.0, 0.0]);
        cover.size = [12.0, 12.0];
        let mut small = object(ShapeKind::Disk, [6.0, 6.0], [3.0, 0.0]);
        small.size = [4.0, 4.0];
        let objs = vec![
            object(ShapeKind::Triangle, [20.0, 16.0], [0.0, 0.0]),
            object(ShapeKind::Rectangle, [26.0, 12.0], [6.0, 0.0]),
            small,
            cover,
        ];
        let (_, ann) = generate_video(&scene(objs)).unwrap();
        let present = |i: usize| -> Vec<bool> { ann.instances()[i].boxes.iter().map(|b| b.is_some()).collect() };
        assert_eq!(present(1), vec![true, true, false, false, false]);
        assert_eq!(present(2), vec![false, false, true, true, true]);
    }

    #[test]
    fn boxes_are_tight_hulls_of_masks() {
        let spec = SceneSampler {
            width: 48,
            height: 40,
            frames: 6,
            exit_probability: 0.5,
            hide_probability: 0.2,
            ..Default::default()
        };
        for seed in 0..20 {
            let (_, ann) = generate_video(&spec.sample(seed)).unwrap();
            for inst in ann.instances() {
                for (b, m) in inst.boxes.iter().zip(&inst.masks) {
                    match (b, m) {
                        (Some(b), Some(m)) => assert_eq!(Some(*b), mask_box(m)),
                        (None, None) => {}
                        _ => panic!("unpaired frame"),
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = SceneSampler::default();
        let a = generate_dataset(&s, 3, 5).unwrap();
        let b = generate_dataset(&s, 3, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.annotation, y.annotation);
        }
        let c = generate_dataset(&s, 1, 6).unwrap();
        assert_ne!(a[0].clip, c[0].clip);
    }

    #[test]
    fn empty_scene_has_empty_annotation() {
        let (clip, ann) = generate_video(&scene(vec![])).unwrap();
        assert_eq!(clip.len(), 5);
        assert!(ann.instances().is_empty());
    }

    fn still() -> (Array, Vec<(usize, Mask)>) {
        let (h, w) = (40, 40);
        let disk = Mask::from_fn(h, w, |y, x| {
            (((x as f64 + 0.5 - 20.0).powi(2) + (y as f64 + 0.5 - 20.0).powi(2)) <= 100.0) as u8 as f64
        });
        let img = Array::from_vec(&[3, h, w], (0..3 * h * w).map(|i| (i % 7) as f64 / 7.0).collect());
        (img, vec![(1, disk)])
    }

    #[test]
    fn single_frame_pseudo_video_is_the_image() {
        let (img, inst) = still();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, ann) = pseudo_video(&img, &inst, 1, 10.0, &mut rng).unwrap();
        assert_eq!(clip.frame(0), img.data());
        assert_eq!(ann.instances()[0].masks[0].as_ref(), Some(&inst[0].1));
    }

    #[test]
    fn zero_rotation_repeats_the_image() {
        let (img, inst) = still();
        let (clip, ann, _) = pseudo_video_with_angles(&img, &inst, &[0.0; 5]).unwrap();
        for t in 0..5 {
            assert_eq!(clip.frame(t), img.data());
            assert_eq!(ann.instances()[0].masks[t], ann.instances()[0].masks[0]);
        }
    }

    #[test]
    fn rotation_preserves_disk_area_and_bounds() {
        let (img, inst) = still();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (clip, ann) = pseudo_video(&img, &inst, 5, 10.0, &mut rng).unwrap();
        assert_eq!(clip.len(), 5);
        let a0 = inst[0].1.area();
        for (b, m) in ann.instances()[0].boxes.iter().zip(&ann.instances()[0].masks) {
            let m = m.as_ref().unwrap();
            assert!((m.area() - a0).abs() / a0 <= 0.02, "{} vs {a0}", m.area());
            assert_eq!(Some(b.unwrap()), mask_box(m));
        }
    }

    #[test]
    fn dataset_round_trips_through_json() {
        assert_eq!(
            Dataset::from_json(&Dataset::default().to_json()).unwrap(),
            Dataset::default()
        );
        let videos = generate_dataset(
            &SceneSampler {
                exit_probability: 0.5,
                ..Default::default()
            },
            3,
            1,
        )
        .unwrap();
        let ds = Dataset::from_videos(&videos, shape_categories()).unwrap();
        let back = Dataset::from_json(&ds.to_json()).unwrap();
        assert_eq!(back, ds);
        for v in &videos {
            let ann = back.video_annotation(v.id).unwrap();
            assert_eq!(ann, v.annotation);
        }
    }

    #[test]
    fn pixel_boxes_convert_to_normalized_centers() {
        let b = pixel_to_box([8.0, 4.0, 16.0, 8.0], 32, 16);
        assert_eq!(b, Box::new(0.5, 0.5, 0.5, 0.5));
        assert_eq!(box_to_pixel(&b, 32, 16), [8.0, 4.0, 16.0, 8.0]);
    }

    #[test]
    fn null_segmentation_marks_absence() {
        let text = r#"{"videos":[{"id":1,"width":2,"height":2,"length":2,"file_names":["a","b"]}],
            "annotations":[{"id":1,"video_id":1,"category_id":1,
              "segmentations":[{"size":[2,2],"counts":[1,2,1]},null],"bboxes":[[0,0,2,2],null]}],
            "categories":[{"id":1,"name":"x"}]}"#;
        let ds = Dataset::from_json(text).unwrap();
        let ann = ds.video_annotation(1).unwrap();
        assert!(ann.instances()[0].boxes[0].is_some());
        assert!(ann.instances()[0].boxes[1].is_none());
        assert_eq!(ann.instances()[0].boxes[0], Some(Box::new(0.5, 0.5, 1.0, 1.0)));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = |text: &str| Dataset::from_json(text).unwrap_err().to_string();
        let e = err(
            r#"{"videos":[{"id":1,"width":"x","height":2,"length":1,"file_names":["a"]}],"annotations":[],"categories":[]}"#,
        );
        assert!(e.starts_with("videos[0].width"), "{e}");
        let e = err(
            r#"{"videos":[{"id":1,"width":2,"height":2,"length":1,"file_names":["a"]}],
            "annotations":[{"id":1,"video_id":1,"category_id":4,"segmentations":[null],"bboxes":[null]}],
            "categories":[{"id":1,"name":"x"}]}"#,
        );
        assert!(e.starts_with("annotations[0].category_id"), "{e}");
        let e = err(
            r#"{"videos":[{"id":1,"width":2,"height":2,"length":1,"file_names":["a"]}],
            "annotations":[{"id":1,"video_id":1,"category_id":1,"segmentations":[{"size":[2,2],"counts":[3]}],"bboxes":[[0,0,1,1]]}],
            "categories":[{"id":1,"name":"x"}]}"#,
        );
        assert!(e.starts_with("annotations[0].segmentations[0].counts"), "{e}");
        let e = err(r#"{"videos":[],"annotations":[]}"#);
        assert!(e.contains("categories"), "{e}");
    }

    #[test]
    fn frames_round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let videos = generate_dataset(&SceneSampler::default(), 2, 4).unwrap();
        let ds = write_dataset(dir.path(), &videos, shape_categories()).unwrap();
        let loaded = load_annotations(&dir.path().join("annotations.json")).unwrap();
        assert_eq!(loaded, ds);
        for (v, rec) in videos.iter().zip(&loaded.videos) {
            assert_eq!(load_clip(dir.path(), rec).unwrap(), v.clip);
        }
    }
}
