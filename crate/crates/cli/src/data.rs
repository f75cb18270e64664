//! Training sources, frame resizing, and clip sampling.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;
use vidseg_core::maskops::{resize_mask, Mask, ResizeMode};
use vidseg_core::matchloss::{InstanceTrack, VideoAnnotation};
use vidseg_core::tensor::{Array, Tape};
use vidseg_core::vidgen::{
    generate_dataset, load_annotations, load_clip, mask_box, pseudo_video, shape_categories, CategoryRecord, Dataset,
    LabeledVideo, VideoClip, VidgenError,
};

use crate::config::SourceConfig;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Dataset(#[from] VidgenError),
    #[error("data source {index} has categories {found:?}, expected {expected:?}")]
    Categories {
        index: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("source {0} contains no videos")]
    Empty(usize),
    #[error("{0} categories exceed the model's {1} classes")]
    TooManyCategories(usize, usize),
}

/// Annotation file and frame root for a `<dir|json>` argument.
pub fn dataset_paths(input: &Path) -> (PathBuf, PathBuf) {
    if input.is_dir() {
        (input.join("annotations.json"), input.to_path_buf())
    } else {
        (
            input.to_path_buf(),
            input.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    }
}

/// Loads every video of an annotation file with its frames.
pub fn load_videos(input: &Path) -> Result<(Dataset, Vec<LabeledVideo>), DataError> {
    let (file, root) = dataset_paths(input);
    let ds = load_annotations(&file)?;
    let videos = ds
        .videos
        .iter()
        .map(|v| {
            Ok(LabeledVideo {
                id: v.id,
                clip: load_clip(&root, v)?,
                annotation: ds.video_annotation(v.id)?,
            })
        })
        .collect::<Result<Vec<_>, VidgenError>>()?;
    Ok((ds, videos))
}

/// Scales so the longer side is at most `max_side` (when given), then rounds
/// each side down to a positive multiple of `multiple`.
pub fn fit_size(height: usize, width: usize, max_side: Option<usize>, multiple: usize) -> (usize, usize) {
    let longest = height.max(width) as f64;
    let scale = max_side.map_or(1.0, |m| (m as f64 / longest).min(1.0));
    let round = |v: usize| (((v as f64 * scale) / multiple as f64 + 1e-9).floor() as usize).max(1) * multiple;
    (round(height), round(width))
}

/// Bilinear resize of every frame.
pub fn resize_clip(clip: &VideoClip, height: usize, width: usize) -> VideoClip {
    if clip.size() == (height, width) {
        return clip.clone();
    }
    let tape = Tape::inference();
    let out = tape.constant(clip.frames.clone()).resize_bilinear(height, width);
    VideoClip {
        frames: out.value().as_ref().clone(),
    }
}

/// Nearest-neighbour mask resize; boxes are recomputed from the resized masks
/// and instances that vanish are dropped.
pub fn resize_annotation(ann: &VideoAnnotation, height: usize, width: usize) -> VideoAnnotation {
    if ann.size() == (height, width) {
        return ann.clone();
    }
    let instances = ann
        .instances()
        .iter()
        .filter_map(|inst| {
            let masks: Vec<Option<Mask>> = inst
                .masks
                .iter()
                .map(|m| {
                    m.as_ref()
                        .map(|m| resize_mask(m, height, width, ResizeMode::Nearest))
                        .filter(|m| m.area() > 0.0)
                })
                .collect();
            let boxes: Vec<_> = masks.iter().map(|m| m.as_ref().and_then(mask_box)).collect();
            boxes.iter().any(|b| b.is_some()).then_some(InstanceTrack {
                class: inst.class,
                boxes,
                masks,
            })
        })
        .collect();
    VideoAnnotation::new(ann.frames(), height, width, instances).expect("resized annotation stays consistent")
}

/// Resizes a labeled video to a size the model accepts.
pub fn fit_video(v: &LabeledVideo, max_side: Option<usize>, multiple: usize) -> LabeledVideo {
    let (h, w) = v.clip.size();
    let (nh, nw) = fit_size(h, w, max_side, multiple);
    LabeledVideo {
        id: v.id,
        clip: resize_clip(&v.clip, nh, nw),
        annotation: resize_annotation(&v.annotation, nh, nw),
    }
}

/// `t` sorted frame indices: distinct when the video is long enough,
/// otherwise drawn with replacement.
pub fn sample_frames(len: usize, t: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = if len >= t {
        sample(rng, len, t).into_vec()
    } else {
        (0..t).map(|_| rng.random_range(0..len)).collect()
    };
    idx.sort_unstable();
    idx
}

enum Source {
    Videos(Vec<LabeledVideo>),
    Stills {
        images: Vec<(Array, Vec<(usize, Mask)>)>,
        max_rotation: f64,
    },
}

/// All training sources with their sampling weights.
pub struct TrainingData {
    sources: Vec<Source>,
    weights: Vec<f64>,
    pub categories: Vec<CategoryRecord>,
}

impl TrainingData {
    pub fn load(sources: &[SourceConfig], max_side: Option<usize>, multiple: usize) -> Result<Self, DataError> {
        let mut out = Vec::new();
        let mut categories: Option<Vec<CategoryRecord>> = None;
        for (i, s) in sources.iter().enumerate() {
            let (src, cats) = match s {
                SourceConfig::Synthetic {
                    videos, seed, sampler, ..
                } => (
                    Source::Videos(generate_dataset(sampler, *videos, *seed)?),
                    shape_categories(),
                ),
                SourceConfig::Annotations { path, .. } => {
                    let (ds, videos) = load_videos(path)?;
                    (Source::Videos(videos), ds.categories)
                }
                SourceConfig::Pseudo { path, max_rotation, .. } => {
                    let (ds, videos) = load_videos(path)?;
                    let images = videos
                        .into_iter()
                        .map(|v| {
                            let (h, w) = v.clip.size();
                            let image = Array::from_vec(&[3, h, w], v.clip.frame(0).to_vec());
                            let inst = v
                                .annotation
                                .instances()
                                .iter()
                                .filter_map(|i| i.masks[0].clone().map(|m| (i.class, m)))
                                .collect();
                            (image, inst)
                        })
                        .collect();
                    (
                        Source::Stills {
                            images,
                            max_rotation: *max_rotation,
                        },
                        ds.categories,
                    )
                }
            };
            let src = match src {
                Source::Videos(v) => Source::Videos(v.iter().map(|v| fit_video(v, max_side, multiple)).collect()),
                other => other,
            };
            let empty = match &src {
                Source::Videos(v) => v.is_empty(),
                Source::Stills { images, .. } => images.is_empty(),
            };
            if empty {
                return Err(DataError::Empty(i));
            }
            match &categories {
                None => categories = Some(cats),
                Some(c) if *c != cats => {
                    let names = |c: &[CategoryRecord]| c.iter().map(|r| r.name.clone()).collect();
                    return Err(DataError::Categories {
                        index: i,
                        expected: names(c),
                        found: names(&cats),
                    });
                }
                _ => {}
            }
            out.push(src);
        }
        Ok(Self {
            sources: out,
            weights: sources.iter().map(|s| s.weight()).collect(),
            categories: categories.unwrap_or_default(),
        })
    }

    /// In-memory videos as a single source.
    pub fn from_videos(videos: Vec<LabeledVideo>, categories: Vec<CategoryRecord>) -> Self {
        Self {
            sources: vec![Source::Videos(videos)],
            weights: vec![1.0],
            categories,
        }
    }

    /// Every video of the video sources.
    pub fn videos(&self) -> impl Iterator<Item = &LabeledVideo> {
        self.sources.iter().flat_map(|s| match s {
            Source::Videos(v) => v.as_slice(),
            Source::Stills { .. } => &[],
        })
    }

    /// Draws a source by weight, a video uniformly, then `t` frames.
    pub fn sample_clip(
        &self,
        t: usize,
        max_side: Option<usize>,
        multiple: usize,
        rng: &mut impl Rng,
    ) -> (VideoClip, VideoAnnotation) {
        let total: f64 = self.weights.iter().sum();
        let mut r = rng.random_range(0.0..total);
        let mut pick = self.sources.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        match &self.sources[pick] {
            Source::Videos(videos) => {
                let v = &videos[rng.random_range(0..videos.len())];
                let idx = sample_frames(v.clip.len(), t, rng);
                (v.clip.select_frames(&idx), v.annotation.select_frames(&idx))
            }
            Source::Stills { images, max_rotation } => {
                let (img, inst) = &images[rng.random_range(0..images.len())];
                let (clip, ann) =
                    pseudo_video(img, inst, t, *max_rotation, rng).expect("still image masks match the image");
                let v = fit_video(
                    &LabeledVideo {
                        id: 0,
                        clip,
                        annotation: ann,
                    },
                    max_side,
                    multiple,
                );
                (v.clip, v.annotation)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use vidseg_core::vidgen::SceneSampler;

    #[test]
    fn fit_size_rounds_to_multiples() {
        assert_eq!(fit_size(96, 96, None, 8), (96, 96));
        assert_eq!(fit_size(100, 50, None, 8), (96, 48));
        assert_eq!(fit_size(720, 1280, Some(640), 8), (360, 640));
        assert_eq!(fit_size(3, 3, None, 8), (8, 8));
    }

    #[test]
    fn frame_sampling_is_sorted_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let f = sample_frames(9, 5, &mut rng);
            assert!(f.windows(2).all(|w| w[0] < w[1]));
        }
        let f = sample_frames(2, 5, &mut rng);
        assert_eq!(f.len(), 5);
        assert!(f.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn resized_annotation_keeps_tight_boxes() {
        let v = &generate_dataset(&SceneSampler::default(), 1, 0).unwrap()[0];
        let small = fit_video(v, Some(48), 8);
        assert_eq!(small.clip.size(), (48, 48));
        for inst in small.annotation.instances() {
            for (b, m) in inst.boxes.iter().zip(&inst.masks) {
                assert_eq!(*b, m.as_ref().and_then(mask_box));
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let videos = generate_dataset(&SceneSampler::default(), 3, 0).unwrap();
        let data = TrainingData::from_videos(videos, shape_categories());
        let draw = |s| data.sample_clip(3, None, 8, &mut ChaCha8Rng::seed_from_u64(s));
        assert_eq!(draw(4), draw(4));
    }
}
