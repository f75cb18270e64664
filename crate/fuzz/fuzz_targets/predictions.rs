//! Prediction files must parse or fail cleanly, and evaluation against a
//! fixed ground truth must reject or score them within [0, 1].
#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use vidseg_core::vidgen::{generate_dataset, shape_categories, Dataset, SceneSampler};
use vidseg_core::viseval::{evaluate, parse_predictions};

fn ground_truth() -> &'static Dataset {
    static GT: OnceLock<Dataset> = OnceLock::new();
    GT.get_or_init(|| {
        let sampler = SceneSampler {
            width: 8,
            height: 8,
            frames: 2,
            ..Default::default()
        };
        let videos = generate_dataset(&sampler, 2, 0).expect("generates");
        Dataset::from_videos(&videos, shape_categories()).expect("valid dataset")
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(preds) = parse_predictions(text) else {
        return;
    };
    if let Ok(r) = evaluate(&preds, ground_truth()) {
        for v in [r.ap, r.ap50, r.ap75, r.ar1, r.ar10] {
            assert!((0.0..=1.0).contains(&v), "metric {v} out of range");
        }
    }
});
