//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! The synthetic end-to-end check trains a full desk-scale model; set
//! `MORPHABLE_SKIP_E2E=1` to report it as skipped instead.

mod common;
mod props;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use morphable::config::Config;
use morphable::data::synth::{generate_dataset, Family, SynthSpec};
use morphable::infer::{evaluate, synthetic_pairs, PoseOptions};
use morphable::losses::{
    appearance_prob, chamfer_distance, farthest_point_sample, loss_appearance, loss_chamfer, loss_deform,
    loss_deform_smooth, loss_eikonal, loss_mask, loss_mask_dt, surface_prob,
};
use morphable::math::gradcheck::check_gradients;
use morphable::math::{Activation, Mlp, Module, Tape, Tensor};
use morphable::render::{project, rotation_var, soft_mask, Intrinsics, SoftMaskParams};
use morphable::tetra::{extract_from_node_values, marching_tets_values, Mesh, SdfField, TetGrid};
use morphable::train::train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, d).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    t(shape, &d)
}

const GRAD_TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    // Silhouette terms through projection: 4 vertices, 2 faces, 8x8 pixels.
    let k = Intrinsics {
        fx: 8.0,
        fy: 8.0,
        cx: 4.0,
        cy: 4.0,
        width: 8,
        height: 8,
    };
    let faces = Arc::new(vec![[0u32, 1, 2], [1, 3, 2]]);
    let params = SoftMaskParams { gamma: 0.1, top_k: 8 };
    let target = t(&[64], &(0..64).map(|i| f64::from((i % 8) > 3 && (i / 8) > 2)).collect::<Vec<_>>());
    let dt = t(&[64], &(0..64).map(|i| if (i % 8) > 3 && (i / 8) > 2 { ((i % 8) - 3) as f64 } else { 0.0 }).collect::<Vec<_>>());
    let verts = t(&[4, 3], &[-1.1, -0.9, 0.1, 1.0, -1.2, -0.1, -0.8, 1.1, 0.05, 1.2, 1.0, -0.2]);
    let w = t(&[3], &[0.1, -0.2, 0.05]);
    let silhouette = |tp: &mut Tape<f64>, v: &[morphable::math::Var]| {
        let r = rotation_var(tp, v[1]);
        let p = project(tp, v[0], r, [0.0, 0.0, 4.0], &k).unwrap();
        soft_mask(tp, p.uv, &faces, &k, params)
    };
    worst.push((
        "mask",
        check_gradients(
            &|tp, v| {
                let m = silhouette(tp, v);
                loss_mask(tp, m, &target).unwrap()
            },
            &[verts.clone(), w.clone()],
            H,
        ),
    ));
    worst.push((
        "mask_dt",
        check_gradients(
            &|tp, v| {
                let m = silhouette(tp, v);
                loss_mask_dt(tp, m, &dt).unwrap()
            },
            &[verts.clone(), w.clone()],
            H,
        ),
    ));

    worst.push((
        "chamfer",
        check_gradients(
            &|tp, v| loss_chamfer(tp, v[0], v[1]).unwrap(),
            &[random(&mut rng, &[12, 3], -1.0, 1.0), random(&mut rng, &[20, 3], -1.0, 1.0)],
            H,
        ),
    ));

    let mut mrng = ChaCha8Rng::seed_from_u64(3);
    let mlp = Mlp::<f64>::new(&[3, 6, 6, 1], Activation::Softplus, &mut mrng).unwrap();
    let sdf = SdfField { mlp: mlp.clone() };
    let pts = random(&mut rng, &[10, 3], -1.0, 1.0);
    let weights: Vec<Tensor<f64>> = mlp.params().into_iter().map(|(_, x)| x.clone()).collect();
    worst.push(("eikonal", check_gradients(&|tp, v| loss_eikonal(tp, &sdf, v, &pts).unwrap(), &weights, H)));

    let v0 = random(&mut rng, &[8, 3], -1.0, 1.0);
    let v1 = random(&mut rng, &[8, 3], -1.0, 1.0);
    worst.push(("deform", check_gradients(&|tp, v| loss_deform(tp, v[0], v[1]).unwrap(), &[v0.clone(), v1.clone()], H)));
    let edges = [[0u32, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [0, 7]];
    worst.push((
        "deform_smooth",
        check_gradients(&|tp, v| loss_deform_smooth(tp, v[0], v[1], &edges).unwrap(), &[v0, v1], H),
    ));

    let phat = t(&[4, 4], &[0.7, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0, 1.0, 0.2, 0.3, 0.5, 0.0, 0.1, 0.1, 0.1, 0.7]);
    worst.push((
        "appearance",
        check_gradients(
            &|tp, v| {
                let s = tp.normalize_rows(v[0]);
                let f = tp.normalize_rows(v[1]);
                let b = tp.normalize_rows(v[2]);
                loss_appearance(tp, s, &phat, f, b, 14.3).unwrap()
            },
            &[random(&mut rng, &[4, 5], -1.0, 1.0), random(&mut rng, &[3, 5], -1.0, 1.0), random(&mut rng, &[1, 5], -1.0, 1.0)],
            H,
        ),
    ));

    // Vertex positions of a one-cube grid with a single interior corner.
    let grid = TetGrid::new(1).unwrap();
    let node_sdf: Vec<f64> = grid
        .positions()
        .iter()
        .map(|p| ((p[0] + 1.0).powi(2) + (p[1] + 1.0).powi(2) + (p[2] + 1.0).powi(2)).sqrt() - 1.3)
        .collect();
    let probe = random(&mut rng, &[7, 3], -1.0, 1.0);
    let n = marching_tets_values::<f64>(&grid, &node_sdf).vertex_count();
    let probe = t(&[n, 3], &probe.data()[..3 * n].iter().copied().chain(std::iter::repeat(0.5)).take(3 * n).collect::<Vec<_>>());
    worst.push((
        "marching_tets",
        check_gradients(
            &|tp, v| {
                let e = extract_from_node_values(tp, &grid, v[0]);
                let c = tp.constant(probe.clone());
                let p = tp.mul(e.vertices, c);
                tp.sum(p)
            },
            &[t(&[node_sdf.len(), 1], &node_sdf)],
            H,
        ),
    ));

    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(n > 0 && n <= 20, format!("{n} extracted vertices"))?;
    ensure(max < GRAD_TOL, format!("max rel err {max:.2e} >= {GRAD_TOL:e} ({detail})"))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("max rel err {max:.1e} < 1e-3 in {secs:.1}s ({detail})"))
}

fn box_sdf(p: [f64; 3], half: [f64; 3]) -> f64 {
    let q: Vec<f64> = (0..3).map(|i| p[i].abs() - half[i]).collect();
    let outside = q.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>().sqrt();
    outside + q.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(0.0)
}

fn geometry_suite() -> Outcome {
    let mut lines = Vec::new();
    let shapes: [(&str, Box<dyn Fn([f64; 3]) -> f64>); 3] = [
        ("sphere", Box::new(|p: [f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.7)),
        ("offset sphere", Box::new(|p: [f64; 3]| ((p[0] - 0.1).powi(2) + (p[1] + 0.2).powi(2) + p[2] * p[2]).sqrt() - 0.55)),
        ("box", Box::new(|p: [f64; 3]| box_sdf(p, [0.6, 0.4, 0.5]))),
    ];
    for res in [8, 16] {
        let grid = TetGrid::new(res).unwrap();
        let cell = grid.cell_size();
        for (name, f) in &shapes {
            let values: Vec<f64> = grid.positions().iter().map(|&p| f(p)).collect();
            let mesh: Mesh<f64> = marching_tets_values(&grid, &values);
            let err = (0..mesh.vertex_count()).map(|i| f(mesh.vertex(i)).abs()).fold(0.0, f64::max);
            let chi = mesh.euler_characteristic();
            ensure(mesh.is_watertight(), format!("{name} at grid {res} is not watertight"))?;
            ensure(err < 2.0 * cell, format!("{name} at grid {res}: level-set error {err:.3} >= {:.3}", 2.0 * cell))?;
            ensure(chi == 2, format!("{name} at grid {res}: Euler characteristic {chi}"))?;
            lines.push(format!("{name}@{res} err {:.2} cell", err / cell));
        }
    }
    Ok(format!("watertight, chi 2, {}", lines.join(", ")))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for (na, nb) in [(1, 1), (5, 17), (64, 64), (33, 8)] {
        let a = random(&mut rng, &[na, 3], -1.0, 1.0);
        let b = random(&mut rng, &[nb, 3], -1.0, 1.0);
        let d = |p: &[f64], q: &[f64]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        let one_way = |x: &Tensor<f64>, y: &Tensor<f64>| -> f64 {
            (0..x.rows()).map(|i| (0..y.rows()).map(|j| d(x.row(i), y.row(j))).fold(f64::INFINITY, f64::min)).sum()
        };
        let brute = (one_way(&a, &b) + one_way(&b, &a)) / (na + nb) as f64;
        let got = chamfer_distance(&a, &b).unwrap();
        worst = worst.max((got - brute).abs());
    }
    ensure(worst < 1e-12, format!("chamfer differs from brute force by {worst:e}"))?;

    // Traced by hand: squared distances pick 4 (18), 2 (9), 3 (4), 5 (2), 1.
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [3.0, 3.0, 0.0], [1.0, 1.0, 0.0]];
    let fps = farthest_point_sample(&pts, 6).unwrap();
    ensure(fps == vec![0, 4, 2, 3, 5, 1], format!("farthest point order {fps:?}"))?;

    let kappa = 14.3;
    let angles = [0.0f64, 0.4, 1.3, 2.5];
    let feats: Vec<Vec<f64>> = angles.iter().map(|a| vec![a.cos(), a.sin()]).collect();
    let (s, beta) = (vec![1.0, 0.0], vec![0.0, -1.0]);
    let p = appearance_prob(&s, &feats[..3], &beta, kappa).unwrap();
    let z: f64 = angles[..3].iter().map(|a| (kappa * a.cos()).exp()).sum::<f64>() + 1.0;
    let want: Vec<f64> = angles[..3].iter().map(|a| (kappa * a.cos()).exp() / z).chain([1.0 / z]).collect();
    let app_err = p.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let q = surface_prob([0.0; 3], &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], 1.0).unwrap();
    let zq = 1.0 + (-0.5f64).exp() + (-2.0f64).exp();
    let want_q = [1.0 / zq, (-0.5f64).exp() / zq, (-2.0f64).exp() / zq];
    let surf_err = q.iter().zip(&want_q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(app_err < 1e-9 && surf_err < 1e-9, format!("softmax errors {app_err:e}, {surf_err:e}"))?;
    Ok(format!("chamfer {worst:.0e}, FPS exact, softmax {:.0e}", app_err.max(surf_err)))
}

fn synthetic_end_to_end() -> Outcome {
    if std::env::var_os("MORPHABLE_SKIP_E2E").is_some() {
        return Ok("SKIP".into());
    }
    let start = Instant::now();
    let (train_data, _, _) = generate_dataset(&SynthSpec::new(Family::Ellipsoid, 10, 20, 0)).map_err(|e| e.to_string())?;
    let (test_data, shapes, _) = generate_dataset(&SynthSpec::new(Family::Ellipsoid, 5, 20, 1)).map_err(|e| e.to_string())?;
    let cfg = Config::desk();
    let (model, summary) = train::<f32>(&cfg, &train_data, None).map_err(|e| e.to_string())?;
    let trained = start.elapsed().as_secs_f64();
    let pairs = synthetic_pairs(&test_data, &shapes, 10);
    let report = evaluate(&model, &test_data, &PoseOptions::from_config(&cfg), &pairs).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    let chamfer = summary.template.best_holdout.chamfer;
    let (app0, app) = (summary.joint.initial_holdout.app, summary.joint.best_holdout.app);
    let pck = report.pck.unwrap_or(0.0);
    let detail = format!(
        "chamfer {chamfer:.4}, app {app:.3}/{app0:.3} = {:.2}, Acc30 {:.3}, Acc10 {:.3}, IoU {:.3}, PCK {pck:.3} on {} views, train {:.0}s, total {:.0}s",
        app / app0,
        report.acc30,
        report.acc10,
        report.mean_iou,
        report.samples,
        trained,
        secs
    );
    let ok = chamfer < 0.05
        && app < 0.3 * app0
        && report.samples == 100
        && report.acc30 >= 0.9
        && report.acc10 >= 0.7
        && report.mean_iou >= 0.8
        && pck >= 0.7
        && secs <= 7200.0;
    ensure(ok, detail.clone())?;
    Ok(detail)
}

fn tiny_run(seed: u64) -> Result<(Vec<u8>, Vec<u8>, String), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = common::tiny_data(5);
    let cfg = Config {
        deterministic: true,
        seed,
        ..common::tiny_config()
    };
    let (model, _) = train::<f32>(&cfg, &data, Some(dir.path())).map_err(|e| e.to_string())?;
    let opts = PoseOptions {
        steps: 5,
        ..PoseOptions::from_config(&cfg)
    };
    let report = evaluate(&model, &data, &opts, &[]).map_err(|e| e.to_string())?;
    let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
    Ok((read("model.mcm")?, read("stage2.ckpt")?, serde_json::to_string(&report).unwrap()))
}

fn determinism() -> Outcome {
    let a = tiny_run(9)?;
    let b = tiny_run(9)?;
    ensure(a.0 == b.0, "model files differ".into())?;
    ensure(a.1 == b.1, "checkpoints differ".into())?;
    ensure(a.2 == b.2, "eval reports differ".into())?;
    let c = tiny_run(10)?;
    ensure(a.0 != c.0, "a different seed gave the same model".into())?;
    Ok(format!("model {} B, checkpoint {} B and report identical across runs", a.0.len(), a.1.len()))
}

fn invariant_suite() -> Outcome {
    let mut failed = Vec::new();
    for (name, f) in props::ALL {
        if catch_unwind(AssertUnwindSafe(f)).is_err() {
            failed.push(*name);
        }
    }
    ensure(failed.is_empty(), format!("failing: {}", failed.join(", ")))?;
    Ok(format!("{} properties hold", props::ALL.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 6] = [
        ("gradient suite", gradient_suite),
        ("geometry suite", geometry_suite),
        ("oracle equivalence", oracle_equivalence),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("determinism", determinism),
        ("invariant suite", invariant_suite),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        let outcome = match catch_unwind(f) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(d) if d == "SKIP" => println!("SKIP {name}"),
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
