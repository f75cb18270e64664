//! Finite-difference checks of deformable attention with respect to its
//! queries, reference points, value pyramid and parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_core::deformattn::{level_layout, DeformAttn, DeformAttnConfig, FrameMode};
use vidseg_core::tensor::gradcheck::{check_inputs, check_params};
use vidseg_core::tensor::{Array, LevelShape, ParamStore, Tape, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn setup(seed: u64) -> (DeformAttn, ParamStore, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = DeformAttnConfig {
        dim: 8,
        heads: 2,
        levels: 2,
        points: 2,
    };
    let attn = DeformAttn::new(&mut store, "attn", cfg, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    (attn, store, rng)
}

/// Fixed random projection of the attention output, so every output entry
/// contributes to the checked scalar.
fn objective<'t>(
    attn: &DeformAttn,
    tape: &'t Tape,
    store: &ParamStore,
    [q, r, v]: [Var<'t>; 3],
    levels: &[LevelShape],
    mode: FrameMode,
    probe: &Array,
) -> Var<'t> {
    let values = attn.project_values(tape, store, v);
    let (out, _) = attn.forward(tape, store, q, r, values, levels, mode);
    (out * tape.constant(probe.clone())).sum()
}

#[test]
fn gradients_match_for_inputs_and_parameters() {
    for (seed, ref_dim, mode) in [
        (1, 2, FrameMode::PerFrame),
        (2, 4, FrameMode::PerFrame),
        (3, 4, FrameMode::Flatten),
    ] {
        let (attn, store, mut rng) = setup(seed);
        let levels = level_layout([(4, 5), (2, 3)]);
        let frames = 2;
        let query = random(&mut rng, &[frames, 3, 8], -1.0, 1.0);
        let lo = if ref_dim == 4 { 0.15 } else { 0.05 };
        let reference = random(&mut rng, &[frames, 3, ref_dim], lo, 1.0 - lo);
        let value = random(&mut rng, &[frames, 26, 8], -1.0, 1.0);
        let probe = random(&mut rng, &[frames, 3, 8], -1.0, 1.0);
        let report = check_inputs(&[query.clone(), reference.clone(), value.clone()], 1e-6, |tape, v| {
            objective(&attn, tape, &store, [v[0], v[1], v[2]], &levels, mode, &probe)
        });
        assert!(report.max_rel_error < 1e-4, "inputs, seed {seed}: {report:?}");
        let report = check_params(
            &store,
            1e-6,
            1e-6,
            |_, _| true,
            |tape, s| {
                let inputs = [query.clone(), reference.clone(), value.clone()].map(|a| tape.constant(a));
                objective(&attn, tape, s, inputs, &levels, mode, &probe)
            },
        );
        assert!(report.max_rel_error < 1e-4, "params, seed {seed}: {report:?}");
    }
}
