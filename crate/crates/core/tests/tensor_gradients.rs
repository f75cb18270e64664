//! Every differentiable kernel against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_core::geometry::Box;
use vidseg_core::tensor::gradcheck::check_inputs;
use vidseg_core::tensor::{concat, deform_sample, Array, FocalParams, LevelShape, SamplingPlan, Tape, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Weighted sum with fixed random weights so every output element matters.
fn project<'t>(t: &'t Tape, v: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_array(&mut rng, &v.shape(), -1.0, 1.0);
    (v * t.constant(w)).sum()
}

fn assert_ok(name: &str, r: vidseg_core::tensor::gradcheck::GradCheckReport) {
    assert!(r.max_rel_error < TOL, "{name}: {} ({})", r.max_rel_error, r.worst);
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_array(&mut rng, &[4], 0.5, 2.0);
    let c = rand_array(&mut rng, &[3, 1], -1.0, 1.0);
    let r = check_inputs(&[a, b, c], H, |t, v| {
        let x = (v[0] * v[1] + v[2]) / v[1] - v[0].maximum(v[2]) + v[0].minimum(v[1]).sqr();
        let y = x.sigmoid() + x.exp().scale(0.1) + x.abs() + x.relu() + v[1].ln();
        project(t, y, 7)
    });
    assert_ok("elementwise", r);
}

#[test]
fn reductions_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_array(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_array(&mut rng, &[2, 3, 1], -1.0, 1.0);
    let r = check_inputs(&[a, b], H, |t, v| {
        let p = v[0].permute(&[2, 0, 1]).reshape(&[4, 6]);
        let s = p.sum_axis(1, true).mean_axis(0, false);
        let c = concat(&[v[0], v[1]], 2).narrow(2, 1, 4);
        let i = c.index_select(1, &[2, 0, 2]);
        let e = v[1].expand(&[2, 3, 5]);
        project(t, i, 3) + s.sum() + project(t, e, 4) + project(t, p.transpose(0, 1), 5)
    });
    assert_ok("shapes", r);
}

#[test]
fn matmul_and_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_array(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let w = rand_array(&mut rng, &[4, 5], -1.0, 1.0);
    let b = rand_array(&mut rng, &[2, 4, 2], -1.0, 1.0);
    let r = check_inputs(&[a, w, b], H, |t, v| {
        project(t, v[0].matmul(v[1]), 1) + project(t, v[0].bmm(v[2]), 2)
    });
    assert_ok("matmul", r);
}

#[test]
fn softmax_family_and_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_array(&mut rng, &[2, 4, 3, 3], -2.0, 2.0);
    let g = rand_array(&mut rng, &[4], 0.5, 1.5);
    let b = rand_array(&mut rng, &[4], -0.5, 0.5);
    let g3 = rand_array(&mut rng, &[3], 0.5, 1.5);
    let b3 = rand_array(&mut rng, &[3], -0.5, 0.5);
    let r = check_inputs(&[x, g, b, g3, b3], H, |t, v| {
        let gn = v[0].group_norm(2, v[1], v[2]);
        let ln = v[0].layer_norm(v[3], v[4]);
        project(t, gn, 1) + project(t, ln, 2) + project(t, v[0].softmax(), 3) + project(t, v[0].log_softmax(), 4)
    });
    assert_ok("norms", r);
}

#[test]
fn conv_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&mut rng, &[2, 3, 5, 6], -1.0, 1.0);
    let w = rand_array(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_array(&mut rng, &[4], -0.5, 0.5);
    let r = check_inputs(&[x, w, b], H, |t, v| {
        let y = v[0].conv2d(v[1], Some(v[2]), 2, 1);
        let z = v[0].conv2d(v[1], None, 1, 1);
        project(t, y, 1) + project(t, z.resize_bilinear(7, 4), 2) + project(t, y.resize_bilinear(6, 6), 3)
    });
    assert_ok("conv", r);
}

#[test]
fn deformable_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let levels = vec![
        LevelShape {
            height: 3,
            width: 4,
            start: 0,
        },
        LevelShape {
            height: 2,
            width: 2,
            start: 12,
        },
    ];
    let (heads, hd, q, b) = (2, 3, 2, 2);
    for plan in [
        SamplingPlan::per_frame(levels.clone(), 2),
        SamplingPlan::across_frames(levels.clone(), 1, 2),
    ] {
        let p = plan.points.len();
        let value = rand_array(&mut rng, &[b, 16, heads, hd], -1.0, 1.0);
        let loc = rand_array(&mut rng, &[b, q, heads, p, 2], -0.1, 1.1);
        let att = rand_array(&mut rng, &[b, q, heads, p], 0.0, 1.0);
        let r = check_inputs(&[value, loc, att], 1e-6, |t, v| {
            project(t, deform_sample(v[0], v[1], v[2], &plan), 9)
        });
        assert!(r.max_rel_error < 1e-5, "{} ({})", r.max_rel_error, r.worst);
    }
}

#[test]
fn focal_and_giou() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_array(&mut rng, &[3, 4], -3.0, 3.0);
    let tgt = Array::from_vec(&[3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect());
    let boxes = Array::from_vec(&[2, 4], vec![0.4, 0.5, 0.3, 0.2, 0.6, 0.3, 0.2, 0.4]);
    let targets = [Box::new(0.45, 0.56, 0.25, 0.3), Box::new(0.2, 0.7, 0.1, 0.1)];
    let r = check_inputs(&[x, boxes], H, |t, v| {
        project(t, v[0].sigmoid_focal(&tgt, FocalParams::default()), 1) + project(t, v[1].giou(&targets), 2)
    });
    assert_ok("losses", r);
}
