//! Property checks over randomized inputs, shared by the test suite and
//! the acceptance harness.

use std::sync::Arc;

use morphable::infer::{geodesic_error, iou, EvalReport, SampleRecord};
use morphable::losses::{
    appearance_prob, chamfer_distance, farthest_point_sample, loss_mask, loss_mask_dt, surface_prob,
};
use morphable::math::nn::{Activation, Mlp, Module};
use morphable::math::optim::{AdamConfig, AdamState};
use morphable::math::{Tape, Tensor};
use morphable::morph::{DeformationField, FeatureField};
use morphable::render::{axis_angle_to_matrix, rasterize};
use morphable::tetra::{marching_tets_values, Mesh, TetGrid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

fn points(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..n)
}

fn to_tensor(p: &[[f64; 3]]) -> Tensor<f64> {
    Tensor::new(vec![p.len(), 3], p.iter().flatten().copied().collect()).unwrap()
}

fn axis_angle() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.7f64..1.7)
}

proptest! {
    #![proptest_config(cfg(64))]

    fn tensor_shape_must_match_data(dims in prop::collection::vec(1usize..5, 1..4), extra in 0usize..3) {
        let n: usize = dims.iter().product();
        let ok = Tensor::<f64>::new(dims.clone(), vec![0.5; n]);
        prop_assert!(ok.is_ok());
        prop_assert_eq!(ok.unwrap().len(), n);
        if extra > 0 {
            prop_assert!(Tensor::<f64>::new(dims, vec![0.5; n + extra]).is_err());
        }
    }

    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -30.0..30.0)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = tape.softmax(x);
        let out = tape.value(s);
        prop_assert!(out.all_finite());
        for i in 0..rows {
            prop_assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn backward_is_repeatable_and_ignores_unused_leaves(a in prop::collection::vec(-2.0f64..2.0, 6)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2, 3], a.clone()).unwrap());
        let unused = tape.param(Tensor::new(vec![2, 3], a).unwrap());
        let t = tape.tanh(x);
        let y = tape.mul(t, x);
        let l = tape.sum(y);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        prop_assert_eq!(g1.wrt(x), g2.wrt(x));
        prop_assert!(g1.wrt(unused).data().iter().all(|&v| v == 0.0));
    }

    fn mlp_parameter_count_follows_widths(widths in prop::collection::vec(1usize..9, 2..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::<f64>::new(&widths, Activation::Softplus, &mut rng).unwrap();
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let count: usize = mlp.params().iter().map(|(_, t)| t.len()).sum();
        prop_assert_eq!(count, expected);
    }

    fn adam_moments_track_parameter_shapes(steps in 1usize..5, g in prop::collection::vec(-1.0f64..1.0, 4)) {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let grad = Tensor::new(vec![2, 2], g).unwrap();
        let mut last = adam.step_count();
        for _ in 0..steps {
            adam.step(vec![("w".into(), &mut p)], std::slice::from_ref(&grad)).unwrap();
            prop_assert!(adam.step_count() > last);
            last = adam.step_count();
        }
        for (_, m, v) in adam.moments() {
            prop_assert_eq!(m.shape(), p.shape());
            prop_assert_eq!(v.shape(), p.shape());
        }
    }

    fn chamfer_is_symmetric_and_nonnegative(a in points(20), b in points(20)) {
        let (ta, tb) = (to_tensor(&a), to_tensor(&b));
        let ab = chamfer_distance(&ta, &tb).unwrap();
        let ba = chamfer_distance(&tb, &ta).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(chamfer_distance(&ta, &ta).unwrap().abs() < 1e-15);
    }

    fn mask_losses_have_fixed_signs(soft in prop::collection::vec(0.0f64..1.0, 16), dt in prop::collection::vec(0.0f64..10.0, 16)) {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::vector(soft));
        let mask = Tensor::vector(dt.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect());
        let lm = loss_mask(&mut tape, s, &mask).unwrap();
        let ld = loss_mask_dt(&mut tape, s, &Tensor::vector(dt)).unwrap();
        prop_assert!(tape.value(lm).item() >= 0.0);
        prop_assert!(tape.value(ld).item() <= 0.0);
    }

    fn probabilities_are_distributions(
        s in prop::collection::vec(-1.0f64..1.0, 4),
        feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
        beta in prop::collection::vec(-1.0f64..1.0, 4),
        kappa in 0.1f64..30.0,
        v in prop::array::uniform3(-1.0f64..1.0),
        sampled in points(12),
        sigma in 0.01f64..1.0,
    ) {
        let feats: Vec<Vec<f64>> = feats.into_iter().map(unit).collect();
        let p = appearance_prob(&unit(s), &feats, &unit(beta), kappa).unwrap();
        prop_assert_eq!(p.len(), feats.len() + 1);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let q = surface_prob(v, &sampled, sigma).unwrap();
        prop_assert!(q.iter().all(|&x| x >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn farthest_point_samples_are_distinct(p in points(40), k in 1usize..10) {
        let k = k.min(p.len());
        let ids = farthest_point_sample(&p, k).unwrap();
        prop_assert_eq!(ids.len(), k);
        prop_assert_eq!(ids[0], 0);
        prop_assert!(ids.iter().all(|&i| i < p.len()));
    }

    fn geodesic_error_is_a_metric(a in axis_angle(), b in axis_angle(), c in axis_angle()) {
        let (ra, rb, rc) = (axis_angle_to_matrix(a), axis_angle_to_matrix(b), axis_angle_to_matrix(c));
        let ab = geodesic_error(&ra, &rb);
        prop_assert!((ab - geodesic_error(&rb, &ra)).abs() < 1e-9);
        prop_assert!(geodesic_error(&ra, &ra) < 1e-5);
        prop_assert!((0.0..=180.0).contains(&ab));
        prop_assert!(ab <= geodesic_error(&ra, &rc) + geodesic_error(&rc, &rb) + 1e-6);
    }

    fn iou_is_bounded_and_grows_with_overlap(a in prop::collection::vec(any::<bool>(), 32), b in prop::collection::vec(any::<bool>(), 32), flip in 0usize..32) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        // Moving one pixel of the union into the intersection cannot lower IoU.
        if a[flip] && !b[flip] {
            let mut b2 = b.clone();
            b2[flip] = true;
            prop_assert!(iou(&a, &b2) >= v);
        }
    }

    fn report_accuracies_are_fractions(errors in prop::collection::vec(0.0f64..180.0, 0..12)) {
        let records: Vec<SampleRecord> = errors
            .iter()
            .enumerate()
            .map(|(i, &e)| SampleRecord {
                video_id: "v".into(),
                frame_id: i,
                rotation_error_deg: e,
                iou: 0.5,
                score: 0.0,
                pck_hits: 0,
                pck_total: 0,
            })
            .collect();
        let r = EvalReport::from_records("c", records);
        prop_assert!((0.0..=1.0).contains(&r.acc30));
        prop_assert!((0.0..=1.0).contains(&r.acc10));
        prop_assert!(r.acc10 <= r.acc30);
    }
}

fn sphere_sdf(grid: &TetGrid, c: [f64; 3], r: f64) -> Vec<f64> {
    grid.positions()
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() - r)
        .collect()
}

proptest! {
    #![proptest_config(cfg(24))]

    fn tet_grid_is_valid(res in 1usize..7) {
        let g = TetGrid::new(res).unwrap();
        prop_assert!(g.positions().iter().flatten().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert!((0..g.tets().len()).all(|i| g.tet_volume(i) > 0.0));
    }

    fn interior_spheres_extract_watertight_meshes(
        c in prop::array::uniform3(-0.2f64..0.2),
        r in 0.3f64..0.6,
        res in 4usize..10,
    ) {
        let g = TetGrid::new(res).unwrap();
        let sdf = sphere_sdf(&g, c, r);
        let mesh: Mesh<f64> = marching_tets_values(&g, &sdf);
        prop_assert!(!mesh.is_empty());
        prop_assert!(mesh.is_watertight());
        prop_assert!(mesh.vertices.all_finite());
        // Every vertex lies strictly inside a grid edge crossing the level set.
        for o in &mesh.provenance {
            prop_assert!(o.t > 0.0 && o.t < 1.0);
        }
    }

    fn deformation_starts_at_identity_and_is_per_vertex(p in points(12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = DeformationField::<f64>::new(3, 16, 4, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let bound = field.bind(&mut tape);
        let v = tape.constant(to_tensor(&p));
        let z = tape.constant(Tensor::vector(vec![0.3, -0.1, 0.7, 0.2]));
        let out = field.deform(&mut tape, &bound, v, z).unwrap();
        prop_assert_eq!(tape.value(out), tape.value(v));

        let mut perturbed = field.clone();
        let last = perturbed.mlp.output_bias_mut();
        last.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.1 * (i as f64 + 1.0));
        let rev: Vec<[f64; 3]> = p.iter().rev().copied().collect();
        let mut tape = Tape::<f64>::new();
        let bound = perturbed.bind(&mut tape);
        let v = tape.constant(to_tensor(&p));
        let vr = tape.constant(to_tensor(&rev));
        let z = z_of(&mut tape);
        let a = perturbed.deform(&mut tape, &bound, v, z).unwrap();
        let b = perturbed.deform(&mut tape, &bound, vr, z).unwrap();
        let (a, b) = (tape.value(a), tape.value(b));
        for i in 0..p.len() {
            for k in 0..3 {
                prop_assert!((a.row(i)[k] - b.row(p.len() - 1 - i)[k]).abs() < 1e-12);
            }
        }
    }

    fn vertex_features_are_unit_norm(p in points(16), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = FeatureField::<f64>::new(3, 16, 8, &mut rng).unwrap();
        let f = field.eval(&to_tensor(&p)).unwrap();
        for i in 0..f.rows() {
            let n = f.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }

    fn barycentrics_sum_to_one_on_covered_pixels(
        tri in prop::array::uniform3(prop::array::uniform2(0.0f64..16.0)),
        depth in prop::array::uniform3(1.0f64..5.0),
    ) {
        let r = rasterize(&tri, &depth, &[[0, 1, 2]], 16, 16);
        for p in 0..r.face_id.len() {
            if r.face_id[p] >= 0 {
                let s: f64 = r.bary[p].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(r.bary[p].iter().all(|&b| b >= -1e-9));
            }
        }
    }
}

fn z_of(tape: &mut Tape<f64>) -> morphable::math::Var {
    tape.constant(Tensor::vector(vec![0.3, -0.1, 0.7, 0.2]))
}

fn rendered_features_stay_in_the_visible_triangle_hull() {
    use morphable::render::render_features;
    let uv = vec![[2.0, 2.0], [14.0, 3.0], [6.0, 13.0]];
    let feats = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let faces = Arc::new(vec![[0u32, 1, 2]]);
    let raster = Arc::new(rasterize(&uv, &[2.0; 3], &faces, 16, 16));
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::new(vec![3, 2], uv.iter().flatten().copied().collect()).unwrap());
    let f = tape.constant(Tensor::new(vec![3, 3], feats.iter().flatten().copied().collect()).unwrap());
    let out = render_features(&mut tape, u, f, &faces, &raster);
    let out = tape.value(out);
    let mut covered = 0;
    for p in 0..out.rows() {
        if raster.face_id[p] < 0 {
            continue;
        }
        covered += 1;
        let row = out.row(p);
        assert!(row.iter().all(|&x| x >= -1e-9), "convex weights");
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(covered > 10);
}

fn top_start_is_unchanged_by_scaling_kappa() {
    use morphable::data::synth::GroundTruthField;
    use morphable::infer::PoseOptions;
    let field = GroundTruthField::new(16, 7);
    let truth = axis_angle_to_matrix([0.2, 0.9, -0.1]);
    let shape = crate::common::oracle_shape(&mut ChaCha8Rng::seed_from_u64(3));
    let best = |kappa: f64| {
        let o = crate::common::oracle_with_kappa(&shape, &field, &truth, 32, 10, kappa);
        let starts = PoseOptions::grid(4, &[-30.0, 0.0, 30.0]);
        let scores: Vec<f64> = starts.iter().map(|r| o.problem.score(r).unwrap()).collect();
        (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b })
    };
    assert_eq!(best(14.3), best(2.0 * 14.3));
}

pub const ALL: &[(&str, fn())] = &[
    ("tensor_shape_must_match_data", tensor_shape_must_match_data),
    ("softmax_rows_sum_to_one", softmax_rows_sum_to_one),
    ("backward_is_repeatable_and_ignores_unused_leaves", backward_is_repeatable_and_ignores_unused_leaves),
    ("mlp_parameter_count_follows_widths", mlp_parameter_count_follows_widths),
    ("adam_moments_track_parameter_shapes", adam_moments_track_parameter_shapes),
    ("chamfer_is_symmetric_and_nonnegative", chamfer_is_symmetric_and_nonnegative),
    ("mask_losses_have_fixed_signs", mask_losses_have_fixed_signs),
    ("probabilities_are_distributions", probabilities_are_distributions),
    ("farthest_point_samples_are_distinct", farthest_point_samples_are_distinct),
    ("geodesic_error_is_a_metric", geodesic_error_is_a_metric),
    ("iou_is_bounded_and_grows_with_overlap", iou_is_bounded_and_grows_with_overlap),
    ("report_accuracies_are_fractions", report_accuracies_are_fractions),
    ("tet_grid_is_valid", tet_grid_is_valid),
    ("interior_spheres_extract_watertight_meshes", interior_spheres_extract_watertight_meshes),
    ("deformation_starts_at_identity_and_is_per_vertex", deformation_starts_at_identity_and_is_per_vertex),
    ("vertex_features_are_unit_norm", vertex_features_are_unit_norm),
    ("barycentrics_sum_to_one_on_covered_pixels", barycentrics_sum_to_one_on_covered_pixels),
    ("rendered_features_stay_in_the_visible_triangle_hull", rendered_features_stay_in_the_visible_triangle_hull),
    ("top_start_is_unchanged_by_scaling_kappa", top_start_is_unchanged_by_scaling_kappa),
];

#[allow(dead_code)]
pub fn run(name: &str) {
    let (_, f) = ALL.iter().find(|(n, _)| *n == name).expect("known property");
    f();
}
