//! Finite-difference check of the full training loss with respect to model
//! parameters on a tiny network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_core::encoder::BackboneConfig;
use vidseg_core::geometry::Box;
use vidseg_core::maskops::Mask;
use vidseg_core::matchloss::{hungarian_loss, match_layers, InstanceTrack, LossWeights, VideoAnnotation};
use vidseg_core::model::{normalize_frames, Model, ModelConfig};
use vidseg_core::tensor::gradcheck::check_params;
use vidseg_core::tensor::{Array, ParamStore, Tape};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        dim: 16,
        heads: 2,
        points: 2,
        ffn_dim: 16,
        encoder_layers: 2,
        decoder_layers: 2,
        queries: 3,
        mask_branch_width: 8,
        backbone: BackboneConfig {
            stage_widths: vec![4, 8, 8],
            feature_strides: vec![4, 8],
        },
        detach_refs: false,
        ..Default::default()
    }
}

fn annotation() -> VideoAnnotation {
    let square = |x0: usize, y0: usize, s: usize| {
        let m = Mask::from_fn(8, 8, |y, x| {
            (x >= x0 && x < x0 + s && y >= y0 && y < y0 + s) as u8 as f64
        });
        let b = Box::new(
            (x0 as f64 + s as f64 / 2.0) / 8.0,
            (y0 as f64 + s as f64 / 2.0) / 8.0,
            s as f64 / 8.0,
            s as f64 / 8.0,
        );
        (b, m)
    };
    let (b0, m0) = square(1, 1, 4);
    let (b1, m1) = square(4, 3, 3);
    VideoAnnotation::new(
        3,
        8,
        8,
        vec![
            InstanceTrack {
                class: 0,
                boxes: vec![Some(b0); 3],
                masks: vec![Some(m0.clone()), Some(m0.clone()), Some(m0)],
            },
            InstanceTrack {
                class: 1,
                boxes: vec![Some(b1), None, Some(b1)],
                masks: vec![Some(m1.clone()), None, Some(m1)],
            },
        ],
    )
    .unwrap()
}

/// Moves every parameter off its initial value so zero-initialized
/// projections do not place sampling points on grid-aligned positions.
fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences_for_every_parameter() {
    let (model, mut store) = Model::new(tiny_config(), 11).unwrap();
    perturb(&mut store, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let frames = Array::from_vec(
        &[3, 3, 8, 8],
        (0..3 * 3 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
    );
    let input = normalize_frames(&frames);
    let gt = annotation();
    let w = LossWeights::default();
    let assignments = {
        let tape = Tape::inference();
        let out = model.forward(&tape, &store, tape.constant(input.clone())).unwrap();
        match_layers(&out.layers, &gt, &w).unwrap()
    };
    let start = std::time::Instant::now();
    let report = check_params(
        &store,
        1e-5,
        1e-6,
        |_, j| j % 4 == 0,
        |tape, s| {
            let out = model.forward(tape, s, tape.constant(input.clone())).unwrap();
            hungarian_loss(tape, &out.layers, &gt, &assignments, &w).unwrap().0
        },
    );
    eprintln!("{} scalars in {:?}: {report:?}", report.checked, start.elapsed());
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
