//! Fixtures shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::sync::Arc;

use morphable::config::Config;
use morphable::data::synth::{generate_dataset, view_rotation, Family, GroundTruthField, Shape, SynthSpec};
use morphable::data::Dataset;
use morphable::infer::PoseProblem;
use morphable::losses::farthest_point_sample;
use morphable::math::{Tape, Tensor};
use morphable::render::{project, rasterize, render_features, Intrinsics, Mat3, SoftMaskParams};
use morphable::tetra::{marching_tets_values, Mesh, TetGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small network widths for fast end-to-end checks.
pub fn tiny_config() -> Config {
    Config {
        grid: 8,
        sdf_hidden: 32,
        deform_hidden: 16,
        feature_hidden: 16,
        feature_dim: 8,
        encoder_out_dims: vec![8, 8, 8, 8],
        adapter_out_dims: vec![8, 8, 8],
        vertex_samples: 10,
        eikonal_points: 64,
        batch: 2,
        grad_accum: 1,
        epochs_template: 1,
        epochs_joint: 1,
        lr: 1e-3,
        holdout: 0.34,
        ..Config::default()
    }
}

pub fn tiny_spec(family: Family, seed: u64) -> SynthSpec {
    SynthSpec {
        image_size: 32,
        feature_size: 16,
        channels: 16,
        points: 128,
        focal: 48.0,
        ..SynthSpec::new(family, 3, 2, seed)
    }
}

pub fn tiny_data(seed: u64) -> Dataset {
    generate_dataset(&tiny_spec(Family::Ellipsoid, seed)).unwrap().0
}

pub fn camera(size: usize) -> Intrinsics {
    let f = 1.5 * size as f64;
    Intrinsics {
        fx: f,
        fy: f,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
    }
}

/// Analytic shape meshed on a tet grid.
pub fn shape_mesh(shape: &Shape, grid: usize) -> Mesh<f64> {
    let g = TetGrid::new(grid).unwrap();
    let sdf: Vec<f64> = g.positions().iter().map(|&p| shape.sdf(p)).collect();
    marching_tets_values(&g, &sdf)
}

fn rows(vs: Vec<Vec<f64>>) -> Tensor<f64> {
    let d = vs[0].len();
    Tensor::new(vec![vs.len(), d], vs.concat()).unwrap()
}

/// Pose problem whose image is the mesh itself rendered at `r_star` with
/// ground-truth features, background descriptor off the object.
pub struct Oracle {
    pub problem: PoseProblem,
    pub mesh: Mesh<f64>,
    pub vertex_features: Tensor<f64>,
}

pub const ORACLE_TRANSLATION: [f64; 3] = [0.0, 0.0, 4.0];

pub fn oracle(shape: &Shape, field: &GroundTruthField, r_star: &Mat3, size: usize, grid: usize) -> Oracle {
    oracle_with_kappa(shape, field, r_star, size, grid, 14.3)
}

pub fn oracle_with_kappa(
    shape: &Shape,
    field: &GroundTruthField,
    r_star: &Mat3,
    size: usize,
    grid: usize,
    kappa: f64,
) -> Oracle {
    let mesh = shape_mesh(shape, grid);
    let verts: Vec<[f64; 3]> = (0..mesh.vertex_count()).map(|i| mesh.vertex(i)).collect();
    let feats = rows(verts.iter().map(|&v| field.eval(shape.semantic_coord(v))).collect());
    let ids = farthest_point_sample(&verts, 150.min(verts.len())).unwrap();
    let sampled = rows(ids.iter().map(|&i| feats.row(i).to_vec()).collect());
    let k = camera(size);
    let faces = Arc::new(mesh.faces.clone());
    let mut tape = Tape::<f64>::new();
    let rot = tape.constant(Tensor::from_f64(&[3, 3], &r_star.concat()).unwrap());
    let v = tape.constant(mesh.vertices.clone());
    let proj = project(&mut tape, v, rot, ORACLE_TRANSLATION, &k).unwrap();
    let pts: Vec<[f64; 2]> = tape.value(proj.uv).data().chunks(2).map(|c| [c[0], c[1]]).collect();
    let raster = Arc::new(rasterize(&pts, &proj.depth, &faces, size, size));
    let fv = tape.constant(feats.clone());
    let img = render_features(&mut tape, proj.uv, fv, &faces, &raster);
    let img = tape.value(img);
    let d = feats.cols();
    let mut data = Vec::with_capacity(size * size * d);
    for p in 0..size * size {
        if raster.covered(p) {
            let r = img.row(p);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(r.iter().map(|x| x / n));
        } else {
            data.extend_from_slice(&field.background);
        }
    }
    let image = Tensor::new(vec![size * size, d], data).unwrap();
    let problem = PoseProblem::new(
        mesh.vertices.clone(),
        faces,
        feats.clone(),
        &sampled,
        &field.background,
        image,
        ORACLE_TRANSLATION,
        k,
        kappa,
        SoftMaskParams::default(),
    )
    .unwrap();
    Oracle {
        problem,
        mesh,
        vertex_features: feats,
    }
}

/// Random view in the range the synthetic generator uses.
pub fn random_view(rng: &mut ChaCha8Rng) -> Mat3 {
    view_rotation(
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(-30f64..30.0).to_radians(),
        rng.gen_range(-5f64..5.0).to_radians(),
    )
}

pub fn oracle_shape(rng: &mut ChaCha8Rng) -> Shape {
    let mut s = Shape::sample(Family::Ellipsoid, rng);
    s.axes = s.axes.map(|a| 0.9 * a);
    s
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
