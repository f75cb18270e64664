//! Attention diagnostics: sampling points and frame weights as JSON plus
//! per-frame overlay images and weight bar charts.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vidseg_core::decoder::{export_attention_diagnostics, AttentionDiagnostics};
use vidseg_core::model::{normalize_frames, Model, ModelError};
use vidseg_core::tensor::{ParamStore, Tape};
use vidseg_core::vidgen::VideoClip;

use crate::data::{fit_size, resize_clip};

/// Upscaling of overlay images relative to the model input.
const OVERLAY_SCALE: u32 = 4;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

#[derive(Debug, Error)]
pub enum DiagnoseError {
    #[error(transparent)]
    Model(#[from] ModelError),
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
    #[error("invalid diagnostics: {0}")]
    Schema(String),
}

/// Final-layer class and score of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySummary {
    pub query: usize,
    pub class: usize,
    pub score: f64,
}

/// File written by `diagnose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsExport {
    pub video_id: u64,
    /// Model input size `(height, width)`.
    pub frame_size: (usize, usize),
    /// Queries drawn in the overlays, best first.
    pub highlighted: Vec<QuerySummary>,
    pub attention: AttentionDiagnostics,
}

impl DiagnosticsExport {
    /// Checks nesting depths and that each query's frame weights sum to 1
    /// (or are all ones under plain-sum aggregation).
    pub fn validate(&self) -> Result<(), String> {
        let a = &self.attention;
        for l in &a.layers {
            let p = format!("layers[{}]", l.layer);
            if l.sampling_points.len() != a.frames || l.sampling_weights.len() != a.frames {
                return Err(format!("{p}: expected {} frames", a.frames));
            }
            for (t, (pts, ws)) in l.sampling_points.iter().zip(&l.sampling_weights).enumerate() {
                if pts.len() != a.queries || ws.len() != a.queries {
                    return Err(format!("{p}.sampling_points[{t}]: expected {} queries", a.queries));
                }
                for (q, (ph, wh)) in pts.iter().zip(ws).enumerate() {
                    if ph.len() != wh.len() || ph.iter().zip(wh).any(|(a, b)| a.len() != b.len()) {
                        return Err(format!(
                            "{p}.sampling_points[{t}][{q}]: points and weights differ in shape"
                        ));
                    }
                    if ph.iter().flatten().flatten().any(|v| !v.is_finite()) {
                        return Err(format!("{p}.sampling_points[{t}][{q}]: non-finite coordinate"));
                    }
                }
            }
            if l.frame_weights.len() != a.queries {
                return Err(format!("{p}.frame_weights: expected {} queries", a.queries));
            }
            for (q, w) in l.frame_weights.iter().enumerate() {
                if w.len() != a.frames {
                    return Err(format!("{p}.frame_weights[{q}]: expected {} frames", a.frames));
                }
                if (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 && w.iter().any(|&x| x != 1.0) {
                    return Err(format!("{p}.frame_weights[{q}]: weights do not sum to 1"));
                }
            }
        }
        Ok(())
    }
}

/// Runs the model on `clip` and collects sampling points and frame weights.
pub fn diagnose_clip(
    model: &Model,
    store: &ParamStore,
    video_id: u64,
    clip: &VideoClip,
    max_size: Option<usize>,
    highlight: usize,
) -> Result<(DiagnosticsExport, VideoClip), DiagnoseError> {
    let (h, w) = clip.size();
    let (nh, nw) = fit_size(h, w, max_size, model.config.backbone.size_multiple());
    let input = resize_clip(clip, nh, nw);
    let tape = Tape::inference();
    let out = model.forward(&tape, store, tape.constant(normalize_frames(&input.frames)))?;
    let attention = export_attention_diagnostics(&out.decoder);
    let set = out.layers.last().expect("decoder has layers").to_prediction_set();
    let mut ranked: Vec<QuerySummary> = (0..set.num_queries())
        .map(|q| {
            let (class, score) = set.score(q);
            QuerySummary { query: q, class, score }
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    ranked.truncate(highlight);
    Ok((
        DiagnosticsExport {
            video_id,
            frame_size: (nh, nw),
            highlighted: ranked,
            attention,
        },
        input,
    ))
}

fn put_dot(img: &mut RgbImage, x: f64, y: f64, radius: i64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (cx, cy) = ((x * w as f64) as i64, (y * h as f64) as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && px < w && py < h {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

fn frame_image(clip: &VideoClip, t: usize) -> RgbImage {
    let (h, w) = clip.size();
    let hw = h * w;
    let f = clip.frame(t);
    let s = OVERLAY_SCALE;
    RgbImage::from_fn(w as u32 * s, h as u32 * s, |x, y| {
        let i = (y / s) as usize * w + (x / s) as usize;
        let c = |ch: usize| (f[ch * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([c(0), c(1), c(2)])
    })
}

fn save(img: &RgbImage, path: &Path) -> Result<(), DiagnoseError> {
    img.save(path).map_err(|source| DiagnoseError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `diagnostics.json`, `layer{l}_frame{t}.png` overlays with the
/// sampling points of each highlighted query in its own color (larger dots
/// for larger attention weights), and `layer{l}_weights.png` bar charts of
/// frame weights per highlighted query. Returns the written paths.
pub fn write_diagnostics(
    dir: &Path,
    export: &DiagnosticsExport,
    clip: &VideoClip,
) -> Result<Vec<PathBuf>, DiagnoseError> {
    export.validate().map_err(DiagnoseError::Schema)?;
    std::fs::create_dir_all(dir).map_err(|source| DiagnoseError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let json = dir.join("diagnostics.json");
    std::fs::write(
        &json,
        serde_json::to_string_pretty(export).expect("diagnostics serialize"),
    )
    .map_err(|source| DiagnoseError::Io {
        path: json.clone(),
        source,
    })?;
    written.push(json);
    let a = &export.attention;
    for layer in &a.layers {
        for t in 0..a.frames {
            let mut img = frame_image(clip, t);
            for (rank, q) in export.highlighted.iter().enumerate() {
                let color = PALETTE[rank % PALETTE.len()];
                let heads = &layer.sampling_points[t][q.query];
                let weights = &layer.sampling_weights[t][q.query];
                for (pts, ws) in heads.iter().zip(weights) {
                    let top = ws.iter().cloned().fold(0.0, f64::max).max(1e-12);
                    for (p, w) in pts.iter().zip(ws) {
                        let radius = if *w >= 0.5 * top { 2 } else { 1 };
                        put_dot(&mut img, p[0], p[1], radius, color);
                    }
                }
            }
            let path = dir.join(format!("layer{}_frame{t}.png", layer.layer));
            save(&img, &path)?;
            written.push(path);
        }
        let (bar_w, gap, height) = (12u32, 8u32, 100u32);
        let groups = export.highlighted.len().max(1) as u32;
        let width = groups * (a.frames as u32 * bar_w + gap) + gap;
        let mut chart = RgbImage::from_pixel(width, height + 2 * gap, Rgb([255, 255, 255]));
        for (rank, q) in export.highlighted.iter().enumerate() {
            let color = PALETTE[rank % PALETTE.len()];
            let x0 = gap + rank as u32 * (a.frames as u32 * bar_w + gap);
            for (t, w) in layer.frame_weights[q.query].iter().enumerate() {
                let top = layer.frame_weights[q.query]
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max)
                    .max(1e-12);
                let bar = ((w / top) * height as f64).round() as u32;
                for x in x0 + t as u32 * bar_w..x0 + (t as u32 + 1) * bar_w - 2 {
                    for y in gap + height - bar..gap + height {
                        chart.put_pixel(x, y, Rgb(color));
                    }
                }
            }
        }
        let path = dir.join(format!("layer{}_weights.png", layer.layer));
        save(&chart, &path)?;
        written.push(path);
    }
    Ok(written)
}
