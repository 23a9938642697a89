//! Pose estimation by render-and-compare on feature agreement, plus the
//! evaluation metrics.
//!
//! The pose objective is the mean over pixels of the probability the
//! appearance model assigns to what the mesh renders there: the rendered
//! vertex feature where the object covers the pixel, the background
//! descriptor elsewhere. The soft silhouette blends the two so that
//! the boundary carries gradient.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::synth::{pixel_ray, view_rotation, Shape};
use crate::data::{Dataset, FeatureMap, TrainingSample};
use crate::error::{Error, Result};
use crate::losses::farthest_point_sample;
use crate::math::{AdamConfig, AdamState, Real, Tape, Tensor};
pub use crate::render::geodesic_error_deg as geodesic_error;
use crate::render::{
    axis_angle_to_matrix, mat_mul, matrix_to_axis_angle, rasterize, render_features, rotation_var, soft_mask,
    transform, Intrinsics, Mat3, SoftMaskParams,
};
use crate::model::Model;

/// Refined rotation and its objective value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseHypothesis {
    pub rotation: Mat3,
    /// Axis-angle of `rotation`.
    pub axis_angle: [f64; 3],
    pub score: f64,
    /// Objective at the start rotation this hypothesis grew from.
    pub initial_score: f64,
    /// Index of that start.
    pub start: usize,
    pub steps: usize,
}

/// Start grid and refinement schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseOptions {
    pub starts: Vec<Mat3>,
    pub steps: usize,
    pub lr: f64,
    pub tol: f64,
}

impl PoseOptions {
    /// Yaw steps around the full circle at each elevation.
    pub fn grid(yaw_steps: usize, elevations_deg: &[f64]) -> Vec<Mat3> {
        let mut out = Vec::with_capacity(yaw_steps * elevations_deg.len());
        for &e in elevations_deg {
            for k in 0..yaw_steps {
                let yaw = 2.0 * std::f64::consts::PI * k as f64 / yaw_steps as f64;
                out.push(view_rotation(yaw, e.to_radians(), 0.0));
            }
        }
        out
    }

    pub fn from_config(cfg: &Config) -> Self {
        PoseOptions {
            starts: Self::grid(cfg.pose_yaw_steps, &cfg.pose_elevations),
            steps: cfg.pose_steps,
            lr: cfg.pose_lr,
            tol: cfg.pose_tol,
        }
    }
}

/// Everything the pose objective needs for one image.
#[derive(Clone, Debug)]
pub struct PoseProblem {
    /// Instance vertices `[N, 3]`.
    pub vertices: Tensor<f64>,
    pub faces: Arc<Vec<[u32; 3]>>,
    /// Unit vertex features `[N, D]`.
    pub vertex_features: Tensor<f64>,
    /// Unit image descriptors `[H*W, D]`, row-major pixels.
    pub image: Tensor<f64>,
    /// Per-pixel log normalizer of the appearance distribution.
    log_z: Vec<f64>,
    /// Per-pixel probability of the background slot.
    background: Vec<f64>,
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
    pub kappa: f64,
    pub soft: SoftMaskParams,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = x.clone().fold(f64::NEG_INFINITY, f64::max);
    m + x.map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl PoseProblem {
    /// `sampled` are the unit features that normalize the appearance
    /// distribution together with the unit background `beta`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vertices: Tensor<f64>,
        faces: Arc<Vec<[u32; 3]>>,
        vertex_features: Tensor<f64>,
        sampled: &Tensor<f64>,
        beta: &[f64],
        image: Tensor<f64>,
        translation: [f64; 3],
        intrinsics: Intrinsics,
        kappa: f64,
        soft: SoftMaskParams,
    ) -> Result<Self> {
        intrinsics.validate()?;
        let d = vertex_features.cols();
        if faces.is_empty() || vertices.rows() == 0 {
            return Err(Error::Render("cannot estimate pose with an empty mesh".into()));
        }
        if image.shape() != [intrinsics.pixels(), d] || sampled.cols() != d || beta.len() != d {
            return Err(Error::Shape(format!(
                "pose problem: image {:?}, {}x{} camera, feature dim {d}, sampled {:?}, background {}",
                image.shape(),
                intrinsics.width,
                intrinsics.height,
                sampled.shape(),
                beta.len()
            )));
        }
        let (log_z, background): (Vec<f64>, Vec<f64>) = (0..image.rows())
            .map(|p| {
                let s = image.row(p);
                let lb = kappa * dot(s, beta);
                let lz = log_sum_exp((0..sampled.rows()).map(|k| kappa * dot(s, sampled.row(k))).chain([lb]));
                (lz, (lb - lz).exp())
            })
            .unzip();
        Ok(PoseProblem {
            vertices,
            faces,
            vertex_features,
            image,
            log_z,
            background,
            translation,
            intrinsics,
            kappa,
            soft,
        })
    }

    /// Objective at `exp(w) * base`, with its gradient in `w` when asked.
    pub fn score_at(&self, base: &Mat3, w: [f64; 3], want_grad: bool) -> Result<(f64, [f64; 3])> {
        let mut tape = Tape::<f64>::new();
        let wv = if want_grad { tape.param(Tensor::vector(w.to_vec())) } else { tape.constant(Tensor::vector(w.to_vec())) };
        let dr = rotation_var(&mut tape, wv);
        let b = tape.constant(Tensor::from_f64(&[3, 3], &base.concat())?);
        let rot = tape.matmul(dr, b);
        let v = tape.constant(self.vertices.clone());
        let proj = crate::render::project(&mut tape, v, rot, self.translation, &self.intrinsics)?;
        let pts: Vec<[f64; 2]> = tape.value(proj.uv).data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let k = &self.intrinsics;
        let raster = Arc::new(rasterize(&pts, &proj.depth, &self.faces, k.width, k.height));
        let m = soft_mask(&mut tape, proj.uv, &self.faces, k, self.soft);
        let p = k.pixels();
        let covered: Vec<usize> = (0..p).filter(|&i| raster.covered(i)).collect();
        let bg = Tensor::vector(self.background.clone());
        let bg_const = tape.constant(bg);
        let mb = tape.mul(m, bg_const);
        let mut score = tape.sum(mb);
        score = tape.neg(score);
        if !covered.is_empty() {
            let idx = Arc::new(covered.clone());
            let feats = tape.constant(self.vertex_features.clone());
            let fr = render_features(&mut tape, proj.uv, feats, &self.faces, &raster);
            let fr = tape.gather_rows(fr, idx.clone());
            let fr = tape.normalize_rows(fr);
            let s_cov: Vec<f64> = covered.iter().flat_map(|&i| self.image.row(i).iter().copied()).collect();
            let s_cov = tape.constant(Tensor::new(vec![covered.len(), self.image.cols()], s_cov)?);
            let prod = tape.mul(fr, s_cov);
            let logit = tape.sum_cols(prod);
            let logit = tape.scale(logit, self.kappa);
            let lz = tape.constant(Tensor::vector(covered.iter().map(|&i| self.log_z[i]).collect()));
            let logp = tape.sub(logit, lz);
            let q = tape.exp(logp);
            let m2 = tape.reshape(m, &[p, 1]);
            let mc = tape.gather_rows(m2, idx);
            let mc = tape.reshape(mc, &[covered.len()]);
            let mq = tape.mul(mc, q);
            let s = tape.sum(mq);
            score = tape.add(score, s);
        }
        let total_bg: f64 = self.background.iter().sum();
        let score = tape.add_scalar(score, total_bg);
        let score = tape.scale(score, 1.0 / p as f64);
        let value = tape.value(score).item();
        if !value.is_finite() {
            return Err(Error::Numeric("pose objective is not finite".into()));
        }
        if !want_grad {
            return Ok((value, [0.0; 3]));
        }
        let g = tape.backward(score)?;
        let gw = g.wrt(wv);
        Ok((value, [gw.data()[0], gw.data()[1], gw.data()[2]]))
    }

    pub fn score(&self, r: &Mat3) -> Result<f64> {
        Ok(self.score_at(r, [0.0; 3], false)?.0)
    }

    /// Gradient ascent from `start`, keeping the best iterate.
    pub fn refine(&self, start: &Mat3, index: usize, opts: &PoseOptions) -> Result<PoseHypothesis> {
        let mut adam = AdamState::<f64>::new(AdamConfig {
            lr: opts.lr,
            ..AdamConfig::default()
        });
        let mut w = Tensor::vector(vec![0.0; 3]);
        let (initial, _) = self.score_at(start, [0.0; 3], false)?;
        let mut best = (initial, *start);
        let mut last = initial;
        let mut steps = 0;
        for _ in 0..opts.steps {
            let wa = [w.data()[0], w.data()[1], w.data()[2]];
            let (s, g) = match self.score_at(start, wa, true) {
                Ok(x) => x,
                Err(Error::Render(_)) => break,
                Err(e) => return Err(e),
            };
            if s > best.0 {
                best = (s, mat_mul(&axis_angle_to_matrix(wa), start));
            }
            if steps > 0 && (s - last).abs() < opts.tol {
                break;
            }
            last = s;
            let grad = Tensor::vector(g.iter().map(|x| -x).collect());
            adam.step(vec![("w".to_string(), &mut w)], &[grad])?;
            steps += 1;
        }
        let wa = [w.data()[0], w.data()[1], w.data()[2]];
        if let Ok((s, _)) = self.score_at(start, wa, false) {
            if s > best.0 {
                best = (s, mat_mul(&axis_angle_to_matrix(wa), start));
            }
        }
        Ok(PoseHypothesis {
            rotation: best.1,
            axis_angle: matrix_to_axis_angle(&best.1),
            score: best.0,
            initial_score: initial,
            start: index,
            steps,
        })
    }

    /// Refine every start in parallel; the highest score wins, ties go to
    /// the lowest start index.
    pub fn estimate(&self, opts: &PoseOptions) -> Result<PoseHypothesis> {
        if opts.starts.is_empty() {
            return Err(Error::Invalid("pose estimation needs at least one start".into()));
        }
        let hyps = opts
            .starts
            .par_iter()
            .enumerate()
            .map(|(i, r)| self.refine(r, i, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(hyps
            .into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .expect("non-empty"))
    }

    /// Unit rendered vertex features at `r`, `[H*W, D]`, zero off the object.
    pub fn rendered_features(&self, r: &Mat3) -> Result<Tensor<f64>> {
        let mut tape = Tape::<f64>::new();
        let rot = tape.constant(Tensor::from_f64(&[3, 3], &r.concat())?);
        let v = tape.constant(self.vertices.clone());
        let proj = crate::render::project(&mut tape, v, rot, self.translation, &self.intrinsics)?;
        let pts: Vec<[f64; 2]> = tape.value(proj.uv).data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let k = &self.intrinsics;
        let raster = Arc::new(rasterize(&pts, &proj.depth, &self.faces, k.width, k.height));
        let feats = tape.constant(self.vertex_features.clone());
        let fr = render_features(&mut tape, proj.uv, feats, &self.faces, &raster);
        Ok(unit_rows(tape.value(fr)))
    }

    /// Soft silhouette at `r`, `[H*W]`.
    pub fn soft_mask(&self, r: &Mat3) -> Result<Vec<f64>> {
        let mut tape = Tape::<f64>::new();
        let rot = tape.constant(Tensor::from_f64(&[3, 3], &r.concat())?);
        let v = tape.constant(self.vertices.clone());
        let proj = crate::render::project(&mut tape, v, rot, self.translation, &self.intrinsics)?;
        let m = soft_mask(&mut tape, proj.uv, &self.faces, &self.intrinsics, self.soft);
        Ok(tape.value(m).data().to_vec())
    }
}

/// Model quantities shared by every image: template, its features, the
/// sampled features and the background descriptor.
#[derive(Clone, Debug)]
pub struct InferenceContext {
    pub template: Tensor<f64>,
    pub faces: Arc<Vec<[u32; 3]>>,
    pub vertex_features: Tensor<f64>,
    pub sampled: Tensor<f64>,
    pub beta: Vec<f64>,
    pub kappa: f64,
    pub soft: SoftMaskParams,
}

impl InferenceContext {
    pub fn new<T: Real>(model: &Model<T>) -> Result<Self> {
        let mesh = model.template_with_features()?;
        if mesh.is_empty() {
            return Err(Error::Render("model template is empty".into()));
        }
        let feats: Tensor<f64> = mesh.features.as_ref().expect("features attached").cast();
        let verts: Vec<[f64; 3]> = (0..mesh.vertex_count()).map(|i| mesh.vertex(i)).collect();
        let ids = farthest_point_sample(&verts, model.config.vertex_samples.min(verts.len()))?;
        let d = feats.cols();
        let sampled = Tensor::new(vec![ids.len(), d], ids.iter().flat_map(|&i| feats.row(i).to_vec()).collect())?;
        Ok(InferenceContext {
            template: mesh.vertices.cast(),
            faces: Arc::new(mesh.faces.clone()),
            vertex_features: feats,
            sampled,
            beta: model.background_unit().to_f64_vec(),
            kappa: model.config.kappa,
            soft: model.config.soft_mask(),
        })
    }
}

/// Per-image network outputs.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    /// Unit adapted descriptors `[H'*W', D]`.
    pub adapted: Tensor<f64>,
    pub size: (usize, usize),
    /// Instance vertices `[N, 3]`.
    pub vertices: Tensor<f64>,
}

pub fn prepare<T: Real>(model: &Model<T>, ctx: &InferenceContext, raw: &FeatureMap) -> Result<PreparedImage> {
    let latent = model.encode(raw)?;
    let (adapted, size) = model.adapt(raw)?;
    let vertices = model.deform_vertices(&ctx.template.cast(), &latent)?.cast();
    Ok(PreparedImage {
        adapted: adapted.cast(),
        size,
        vertices,
    })
}

/// Camera used when a sample does not carry one.
pub fn default_camera<T: Real>(model: &Model<T>) -> Result<([f64; 3], Intrinsics)> {
    let c = model
        .camera
        .ok_or_else(|| Error::Invalid("model has no reference camera; pass one explicitly".into()))?;
    Ok((c.translation, c.intrinsics))
}

/// Pose problem for one image; intrinsics are rescaled to the adapted grid.
pub fn pose_problem(
    ctx: &InferenceContext,
    img: &PreparedImage,
    translation: [f64; 3],
    intrinsics: &Intrinsics,
) -> Result<PoseProblem> {
    let (h, w) = img.size;
    let k = if (intrinsics.width, intrinsics.height) == (w, h) {
        *intrinsics
    } else {
        intrinsics.rescaled(w, h)
    };
    PoseProblem::new(
        img.vertices.clone(),
        ctx.faces.clone(),
        ctx.vertex_features.clone(),
        &ctx.sampled,
        &ctx.beta,
        img.adapted.clone(),
        translation,
        k,
        ctx.kappa,
        ctx.soft,
    )
}

/// Rotation estimate for one backbone map under the given camera.
pub fn estimate_pose<T: Real>(
    model: &Model<T>,
    raw: &FeatureMap,
    camera: Option<([f64; 3], Intrinsics)>,
    opts: &PoseOptions,
) -> Result<PoseHypothesis> {
    let ctx = InferenceContext::new(model)?;
    let (t, k) = match camera {
        Some(c) => c,
        None => default_camera(model)?,
    };
    let img = prepare(model, &ctx, raw)?;
    pose_problem(&ctx, &img, t, &k)?.estimate(opts)
}

/// Intersection over union of two binary masks; two empty masks give 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "masks must have equal size");
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Hit when the prediction lies within `tau` times the larger bbox side.
pub fn pck(pred: [f64; 2], gt: [f64; 2], bbox: [f64; 2], tau: f64) -> bool {
    let d = ((pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2)).sqrt();
    d <= tau * bbox[0].max(bbox[1])
}

/// Matched target location for one source keypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Target pixel center in image coordinates.
    pub pixel: [f64; 2],
    /// Template vertex the source keypoint was assigned to.
    pub vertex: usize,
    /// True when the background descriptor explains the source keypoint
    /// better than any vertex.
    pub off_object: bool,
}

fn unit_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let mut out = t.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

/// Bilinear resampling of a raw map to `(h, w)` pixel rows `[h*w, C]`,
/// unit-normalized.
pub fn resample_rows(raw: &FeatureMap, h: usize, w: usize) -> Tensor<f64> {
    let (c, hi, wi) = (raw.channels, raw.height, raw.width);
    let mut out = vec![0.0; h * w * c];
    let at = |ch: usize, y: usize, x: usize| raw.data[(ch * hi + y) * wi + x] as f64;
    for i in 0..h {
        let fy = ((i as f64 + 0.5) * hi as f64 / h as f64 - 0.5).clamp(0.0, (hi - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(hi - 1);
        for j in 0..w {
            let fx = ((j as f64 + 0.5) * wi as f64 / w as f64 - 0.5).clamp(0.0, (wi - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(wi - 1);
            let row = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let top = at(ch, y0, x0) * (1.0 - tx) + at(ch, y0, x1) * tx;
                let bot = at(ch, y1, x0) * (1.0 - tx) + at(ch, y1, x1) * tx;
                *o = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    unit_rows(&Tensor::new(vec![h * w, c], out).expect("shape"))
}

/// Descriptors of one image used for matching.
#[derive(Clone, Debug)]
pub struct MatchImage {
    /// Unit backbone rows on the adapted grid.
    pub raw: Tensor<f64>,
    /// Unit adapted rows.
    pub adapted: Tensor<f64>,
    pub size: (usize, usize),
    /// Image size the keypoints refer to.
    pub image_size: (usize, usize),
}

impl MatchImage {
    pub fn new<T: Real>(model: &Model<T>, raw: &FeatureMap, image_size: (usize, usize)) -> Result<Self> {
        let (adapted, size) = model.adapt(raw)?;
        Ok(MatchImage {
            raw: resample_rows(raw, size.0, size.1),
            adapted: adapted.cast(),
            size,
            image_size,
        })
    }

    fn cell(&self, p: [f64; 2]) -> usize {
        let (h, w) = self.size;
        let (ih, iw) = self.image_size;
        let j = ((p[0] * w as f64 / iw as f64).floor() as isize).clamp(0, w as isize - 1) as usize;
        let i = ((p[1] * h as f64 / ih as f64).floor() as isize).clamp(0, h as isize - 1) as usize;
        i * w + j
    }

    fn center(&self, cell: usize) -> [f64; 2] {
        let (h, w) = self.size;
        let (ih, iw) = self.image_size;
        let (i, j) = (cell / w, cell % w);
        [(j as f64 + 0.5) * iw as f64 / w as f64, (i as f64 + 0.5) * ih as f64 / h as f64]
    }
}

/// Transfer a keypoint from `src` to `tgt` by blending backbone similarity
/// (weight `backbone_weight`) with similarity to the matched vertex feature.
pub fn semantic_correspondence(
    ctx: &InferenceContext,
    src: &MatchImage,
    keypoint: [f64; 2],
    tgt: &MatchImage,
    backbone_weight: f64,
) -> Correspondence {
    let p = src.cell(keypoint);
    let s = src.adapted.row(p);
    let (vertex, best) = (0..ctx.vertex_features.rows())
        .map(|v| (v, dot(ctx.vertex_features.row(v), s)))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let off_object = dot(&ctx.beta, s) > best;
    let fv = ctx.vertex_features.row(vertex);
    let rs = src.raw.row(p);
    let mut arg = (0, f64::NEG_INFINITY);
    for q in 0..tgt.raw.rows() {
        let v = backbone_weight * dot(rs, tgt.raw.row(q)) + (1.0 - backbone_weight) * dot(fv, tgt.adapted.row(q));
        if v > arg.1 {
            arg = (q, v);
        }
    }
    Correspondence {
        pixel: tgt.center(arg.0),
        vertex,
        off_object,
    }
}

/// One annotated keypoint transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub video: usize,
    pub src_frame: usize,
    pub tgt_frame: usize,
    pub src: [f64; 2],
    pub tgt: [f64; 2],
    /// Target object bounding box `[width, height]` in pixels.
    pub bbox: [f64; 2],
}

fn mask_bbox(s: &TrainingSample) -> [f64; 2] {
    let (w, h) = (s.width(), s.height());
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
    for i in 0..h {
        for j in 0..w {
            if s.mask[i * w + j] != 0 {
                x0 = x0.min(j);
                x1 = x1.max(j + 1);
                y0 = y0.min(i);
                y1 = y1.max(i + 1);
            }
        }
    }
    [x1.saturating_sub(x0) as f64, y1.saturating_sub(y0) as f64]
}

/// Ground-truth keypoint pairs between consecutive frames of each video,
/// from the analytic shapes the views were rendered from. Source keypoints
/// are spread over the source mask; pairs whose target point is hidden are
/// dropped.
pub fn synthetic_pairs(data: &Dataset, shapes: &[Shape], per_pair: usize) -> Vec<KeypointPair> {
    let mut out = Vec::new();
    for (vi, video) in data.videos.iter().enumerate() {
        let shape = &shapes[vi];
        let norm = video.normalization;
        for f in 0..video.samples.len().saturating_sub(1) {
            let (a, b) = (&video.samples[f], &video.samples[f + 1]);
            let inside: Vec<usize> = (0..a.mask.len()).filter(|&p| a.mask[p] != 0).collect();
            if inside.is_empty() {
                continue;
            }
            let stride = (inside.len() / per_pair.max(1)).max(1);
            let bbox = mask_bbox(b);
            for &p in inside.iter().skip(stride / 2).step_by(stride).take(per_pair) {
                let (x, y) = ((p % a.width()) as f64 + 0.5, (p / a.width()) as f64 + 0.5);
                let Some(q) = surface_point(shape, norm, a, x, y) else { continue };
                let c = transform(&b.rotation, b.translation, q);
                let k = &b.intrinsics;
                let uv = [k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy];
                let Some(back) = surface_point(shape, norm, b, uv[0], uv[1]) else { continue };
                let d = (0..3).map(|i| (back[i] - q[i]).powi(2)).sum::<f64>().sqrt();
                if d > 1e-6 {
                    continue;
                }
                out.push(KeypointPair {
                    video: vi,
                    src_frame: f,
                    tgt_frame: f + 1,
                    src: [x, y],
                    tgt: uv,
                    bbox,
                });
            }
        }
    }
    out
}

/// First surface hit through pixel `(x, y)`, in canonical coordinates.
fn surface_point(
    shape: &Shape,
    norm: crate::data::Normalization,
    s: &TrainingSample,
    x: f64,
    y: f64,
) -> Option<[f64; 3]> {
    let (o, d) = pixel_ray(&s.rotation, s.translation, &s.intrinsics, x, y);
    let raw_o = norm.invert(o);
    let t = shape.ray_hit(raw_o, d)?;
    let hit = [raw_o[0] + t * d[0], raw_o[1] + t * d[1], raw_o[2] + t * d[2]];
    Some(norm.apply(hit))
}

/// Metrics for one evaluated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub video_id: String,
    pub frame_id: usize,
    pub rotation_error_deg: f64,
    pub iou: f64,
    pub score: f64,
    pub pck_hits: usize,
    pub pck_total: usize,
}

/// Aggregate and per-view evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: String,
    pub samples: usize,
    pub acc30: f64,
    pub acc10: f64,
    pub median_error_deg: f64,
    pub mean_iou: f64,
    /// `None` without keypoint annotations.
    pub pck: Option<f64>,
    pub keypoints: usize,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    /// Aggregate from per-view records.
    pub fn from_records(category: &str, records: Vec<SampleRecord>) -> Self {
        let n = records.len();
        let frac = |f: &dyn Fn(&SampleRecord) -> bool| {
            if n == 0 {
                0.0
            } else {
                records.iter().filter(|r| f(r)).count() as f64 / n as f64
            }
        };
        let mut errs: Vec<f64> = records.iter().map(|r| r.rotation_error_deg).collect();
        errs.sort_by(f64::total_cmp);
        let median = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            errs[n / 2]
        } else {
            0.5 * (errs[n / 2 - 1] + errs[n / 2])
        };
        let kp: usize = records.iter().map(|r| r.pck_total).sum();
        let hits: usize = records.iter().map(|r| r.pck_hits).sum();
        EvalReport {
            category: category.to_string(),
            samples: n,
            acc30: frac(&|r| r.rotation_error_deg < 30.0),
            acc10: frac(&|r| r.rotation_error_deg < 10.0),
            median_error_deg: median,
            mean_iou: if n == 0 { 0.0 } else { records.iter().map(|r| r.iou).sum::<f64>() / n as f64 },
            pck: (kp > 0).then(|| hits as f64 / kp as f64),
            keypoints: kp,
            records,
        }
    }

    /// Human-readable table: one row per view, then the aggregates.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>6} {:>10} {:>7} {:>9} {:>7}\n", "video", "frame", "rot_err", "iou", "score", "pck");
        for r in &self.records {
            s.push_str(&format!(
                "{:<12} {:>6} {:>10.3} {:>7.4} {:>9.5} {:>3}/{:<3}\n",
                r.video_id, r.frame_id, r.rotation_error_deg, r.iou, r.score, r.pck_hits, r.pck_total
            ));
        }
        s.push_str(&format!(
            "\ncategory {}  views {}\nacc@30 {:.4}  acc@10 {:.4}  median {:.3} deg\nmean IoU {:.4}\n",
            self.category, self.samples, self.acc30, self.acc10, self.median_error_deg, self.mean_iou
        ));
        match self.pck {
            Some(p) => s.push_str(&format!("PCK@0.1 {:.4} over {} keypoints\n", p, self.keypoints)),
            None => s.push_str("PCK@0.1 n/a\n"),
        }
        s
    }
}

/// PCK threshold used by [`evaluate`].
pub const PCK_TAU: f64 = 0.1;

/// Estimate every view's pose with its own camera, score the rendered
/// silhouette against its mask and, given keypoint pairs, transfer keypoints
/// into each target view.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    opts: &PoseOptions,
    pairs: &[KeypointPair],
) -> Result<EvalReport> {
    let ctx = InferenceContext::new(model)?;
    let cfg = &model.config;
    let views: Vec<(usize, usize)> = data
        .videos
        .iter()
        .enumerate()
        .flat_map(|(v, rec)| (0..rec.samples.len()).map(move |i| (v, i)))
        .collect();
    let records = views
        .iter()
        .map(|&(v, i)| {
            let s = &data.videos[v].samples[i];
            let img = prepare(model, &ctx, &s.features)?;
            let prob = pose_problem(&ctx, &img, s.translation, &s.intrinsics)?;
            let hyp = prob.estimate(opts)?;
            let est = PoseProblem {
                intrinsics: s.intrinsics,
                ..prob
            };
            let pred: Vec<bool> = est.soft_mask(&hyp.rotation)?.into_iter().map(|m| m > 0.5).collect();
            let gt = s.mask_bool();
            let mut hits = 0;
            let mut total = 0;
            let mine: Vec<&KeypointPair> = pairs.iter().filter(|p| p.video == v && p.tgt_frame == i).collect();
            if !mine.is_empty() {
                let src_s = &data.videos[v].samples[mine[0].src_frame];
                let src = MatchImage::new(model, &src_s.features, (src_s.height(), src_s.width()))?;
                let tgt = MatchImage::new(model, &s.features, (s.height(), s.width()))?;
                for kp in mine {
                    let c = semantic_correspondence(&ctx, &src, kp.src, &tgt, cfg.corr_backbone_weight);
                    total += 1;
                    hits += usize::from(pck(c.pixel, kp.tgt, kp.bbox, PCK_TAU));
                }
            }
            let err = geodesic_error(&hyp.rotation, &s.rotation);
            log::info!("{} frame {}: rotation error {err:.1} deg, score {:.3}", s.video_id, s.frame_id, hyp.score);
            Ok(SampleRecord {
                video_id: s.video_id.clone(),
                frame_id: s.frame_id,
                rotation_error_deg: err,
                iou: iou(&pred, &gt),
                score: hyp.score,
                pck_hits: hits,
                pck_total: total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(&data.category, records))
}
