//! Whole-video inference to prediction records.

use vidseg_core::heads::{postprocess, Prediction};
use vidseg_core::model::{Model, ModelError};
use vidseg_core::tensor::ParamStore;
use vidseg_core::vidgen::{CategoryRecord, VideoClip};

use crate::config::InferConfig;
use crate::data::{fit_size, resize_clip};

/// Predictions for one video at its original resolution. The whole clip is
/// processed in one pass whatever its length.
pub fn predict_video(
    model: &Model,
    store: &ParamStore,
    video_id: u64,
    clip: &VideoClip,
    config: &InferConfig,
    categories: &[CategoryRecord],
) -> Result<Vec<Prediction>, ModelError> {
    let (h, w) = clip.size();
    let (nh, nw) = fit_size(h, w, config.max_size, model.config.backbone.size_multiple());
    let input = resize_clip(clip, nh, nw);
    let set = model.predict(store, &input.frames, config.subsample)?;
    Ok(postprocess(&set, config.postprocess, (h, w))
        .iter()
        .filter_map(|inst| {
            categories
                .get(inst.class)
                .map(|c| Prediction::from_instance(video_id, c.id, inst))
        })
        .collect())
}
