//! Synthetic categories with analytic shapes and a known feature field.
//!
//! Every instance is star-shaped around the origin. Views look at the
//! origin from a fixed distance; masks come from exact ray casting, and
//! backbone features are a smooth random-Fourier function of the surface
//! direction normalized by the instance extents, so the same semantic part
//! of every instance carries the same descriptor.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{distance_transform, write_video, Dataset, FeatureMap, Normalization, TrainingSample, VideoRecord};
use crate::error::{Error, Result};
use crate::render::{mat_mul, mat_transpose, Intrinsics, Mat3};

/// Angular frequency scale of the ground-truth feature field.
pub const FIELD_BANDWIDTH: f64 = 3.0;
const ROUNDING: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sphere,
    Ellipsoid,
    RoundedBox,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Family::Sphere),
            "ellipsoid" => Ok(Family::Ellipsoid),
            "box" | "rounded-box" => Ok(Family::RoundedBox),
            _ => Err(Error::Invalid(format!(
                "unknown shape family '{s}' (expected sphere, ellipsoid or box)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Sphere => "sphere",
            Family::Ellipsoid => "ellipsoid",
            Family::RoundedBox => "box",
        })
    }
}

/// One analytic instance, centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub family: Family,
    /// Semi-axes (half extents for boxes).
    pub axes: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn along(o: [f64; 3], d: [f64; 3], s: f64) -> [f64; 3] {
    [o[0] + s * d[0], o[1] + s * d[1], o[2] + s * d[2]]
}

impl Shape {
    pub fn sample(family: Family, rng: &mut impl Rng) -> Shape {
        let axes = match family {
            Family::Sphere => [rng.gen_range(0.5..1.0); 3],
            Family::Ellipsoid => [rng.gen_range(0.95..1.0), rng.gen_range(0.55..0.6), rng.gen_range(0.7..0.75)],
            Family::RoundedBox => [rng.gen_range(0.9..1.0), rng.gen_range(0.5..0.6), rng.gen_range(0.65..0.75)],
        };
        Shape { family, axes }
    }

    pub fn max_axis(&self) -> f64 {
        self.axes.iter().copied().fold(0.0, f64::max)
    }

    /// Signed distance (exact for boxes, a bound-preserving scaling for
    /// ellipsoids).
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        let a = self.axes;
        match self.family {
            Family::Sphere | Family::Ellipsoid => {
                let k = norm([p[0] / a[0], p[1] / a[1], p[2] / a[2]]);
                let amin = a.iter().copied().fold(f64::INFINITY, f64::min);
                (k - 1.0) * amin
            }
            Family::RoundedBox => {
                let q = [0, 1, 2].map(|i| p[i].abs() - (a[i] - ROUNDING));
                let out = norm(q.map(|x| x.max(0.0)));
                out + q[0].max(q[1]).max(q[2]).min(0.0) - ROUNDING
            }
        }
    }

    /// First hit of the ray `o + s d` (s > 0, `d` unit).
    pub fn ray_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match self.family {
            Family::Sphere | Family::Ellipsoid => {
                let a = self.axes;
                let os = [o[0] / a[0], o[1] / a[1], o[2] / a[2]];
                let ds = [d[0] / a[0], d[1] / a[1], d[2] / a[2]];
                let qa = dot(ds, ds);
                let qb = 2.0 * dot(os, ds);
                let qc = dot(os, os) - 1.0;
                let disc = qb * qb - 4.0 * qa * qc;
                if disc < 0.0 {
                    return None;
                }
                let s = (-qb - disc.sqrt()) / (2.0 * qa);
                (s > 0.0).then_some(s)
            }
            Family::RoundedBox => {
                let bound = norm(self.axes);
                let b = dot(o, d);
                let c = dot(o, o) - bound * bound;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let mut s = (-b - disc.sqrt()).max(0.0);
                let far = -b + disc.sqrt();
                while s < far {
                    let dist = self.sdf(along(o, d, s));
                    if dist < 1e-9 {
                        return Some(s);
                    }
                    s += dist;
                }
                None
            }
        }
    }

    /// Surface point in direction `u` from the origin.
    pub fn radial_point(&self, u: [f64; 3]) -> [f64; 3] {
        let n = norm(u);
        let u = u.map(|x| x / n);
        match self.family {
            Family::Sphere | Family::Ellipsoid => {
                let a = self.axes;
                let k = norm([u[0] / a[0], u[1] / a[1], u[2] / a[2]]);
                u.map(|x| x / k)
            }
            Family::RoundedBox => {
                let (mut lo, mut hi) = (0.0, norm(self.axes));
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.sdf(u.map(|x| x * mid)) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                u.map(|x| x * 0.5 * (lo + hi))
            }
        }
    }

    /// Extent-normalized direction of a surface point; the semantic
    /// coordinate of the ground-truth field.
    pub fn semantic_coord(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [p[0] / self.axes[0], p[1] / self.axes[1], p[2] / self.axes[2]];
        let n = norm(q).max(1e-12);
        q.map(|x| x / n)
    }
}

/// Random-Fourier unit feature field over the sphere of semantic
/// coordinates plus a fixed background descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthField {
    pub omega: Vec<[f64; 3]>,
    pub phase: Vec<f64>,
    pub background: Vec<f64>,
}

impl GroundTruthField {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = (0..dim)
            .map(|_| [0; 3].map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                FIELD_BANDWIDTH * z
            }))
            .collect();
        let phase = (0..dim).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let mut background: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = background.iter().map(|x| x * x).sum::<f64>().sqrt();
        background.iter_mut().for_each(|x| *x /= n);
        GroundTruthField { omega, phase, background }
    }

    pub fn dim(&self) -> usize {
        self.phase.len()
    }

    /// Unit descriptor at semantic coordinate `u`.
    pub fn eval(&self, u: [f64; 3]) -> Vec<f64> {
        let mut f: Vec<f64> = self.omega.iter().zip(&self.phase).map(|(w, &p)| (dot(*w, u) + p).cos()).collect();
        let n = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        f.iter_mut().for_each(|x| *x /= n);
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub category: String,
    pub family: Family,
    pub videos: usize,
    pub frames: usize,
    pub seed: u64,
    pub field_seed: u64,
    pub image_size: usize,
    pub feature_size: usize,
    pub channels: usize,
    pub points: usize,
    /// Pinhole focal length in pixels at `image_size`.
    pub focal: f64,
    pub max_elevation_deg: f64,
    pub max_roll_deg: f64,
}

impl SynthSpec {
    pub fn new(family: Family, videos: usize, frames: usize, seed: u64) -> Self {
        SynthSpec {
            category: family.to_string(),
            family,
            videos,
            frames,
            seed,
            field_seed: 7,
            image_size: 64,
            feature_size: 32,
            channels: 128,
            points: 2048,
            focal: 96.0,
            max_elevation_deg: 30.0,
            max_roll_deg: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synthetic spec: {m}")));
        if self.videos == 0 || self.frames == 0 {
            return bad("needs at least one video and one frame");
        }
        if self.image_size < 2 || self.feature_size == 0 || self.feature_size > self.image_size {
            return bad("feature_size must be in 1..=image_size and image_size >= 2");
        }
        if self.channels == 0 || self.points < 4 {
            return bad("needs channels >= 1 and points >= 4");
        }
        if !(self.focal > 0.0) {
            return bad("focal must be positive");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let c = self.image_size as f64 / 2.0;
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: c,
            cy: c,
            width: self.image_size,
            height: self.image_size,
        }
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Object-to-camera rotation for a viewpoint on the upper/lower band
/// around the object's y axis. Zero angles look along object `-z` with
/// object `+y` pointing up in the image.
pub fn view_rotation(yaw: f64, elevation: f64, roll: f64) -> Mat3 {
    let flip = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    mat_mul(&rot_z(roll), &mat_mul(&rot_x(elevation), &mat_mul(&rot_y(yaw), &flip)))
}

/// Ray through image point `(x, y)` in object coordinates.
pub fn pixel_ray(r: &Mat3, t: [f64; 3], k: &Intrinsics, x: f64, y: f64) -> ([f64; 3], [f64; 3]) {
    let rt = mat_transpose(r);
    let dc = [(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0];
    let mut o = [0.0; 3];
    let mut d = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i] -= rt[i][j] * t[j];
            d[i] += rt[i][j] * dc[j];
        }
    }
    let n = norm(d);
    (o, d.map(|v| v / n))
}

/// Render one view of `shape`: mask, distance transform and features.
pub fn render_view(
    spec: &SynthSpec,
    field: &GroundTruthField,
    shape: &Shape,
    rotation: Mat3,
    translation: [f64; 3],
) -> (Vec<u8>, Vec<f32>, FeatureMap) {
    let k = spec.intrinsics();
    let n = spec.image_size;
    let mut mask = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            let (o, d) = pixel_ray(&rotation, translation, &k, j as f64 + 0.5, i as f64 + 0.5);
            if shape.ray_hit(o, d).is_some() {
                mask[i * n + j] = 255;
            }
        }
    }
    let dt = distance_transform(&mask.iter().map(|&m| m != 0).collect::<Vec<_>>(), n, n);
    let f = spec.feature_size;
    let c = field.dim();
    let stride = n as f64 / f as f64;
    let mut data = vec![0.0f32; c * f * f];
    for i in 0..f {
        for j in 0..f {
            let (o, d) = pixel_ray(&rotation, translation, &k, (j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            let desc = match shape.ray_hit(o, d) {
                Some(s) => field.eval(shape.semantic_coord(along(o, d, s))),
                None => field.background.clone(),
            };
            for (ch, v) in desc.iter().enumerate() {
                data[ch * f * f + i * f + j] = *v as f32;
            }
        }
    }
    (mask, dt, FeatureMap::new(c, f, f, data).expect("sized above"))
}

/// In-memory synthetic instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub record: VideoRecord,
    pub shape: Shape,
}

pub fn video_id(i: usize) -> String {
    format!("video_{i:03}")
}

fn gen_video(spec: &SynthSpec, field: &GroundTruthField, index: usize) -> SynthVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let shape = Shape::sample(spec.family, &mut rng);
    let dist = 4.0 * shape.max_axis();
    let id = video_id(index);
    let poses: Vec<Mat3> = (0..spec.frames)
        .map(|_| {
            let yaw = rng.gen_range(0.0..2.0 * PI);
            let el = spec.max_elevation_deg.to_radians();
            let ro = spec.max_roll_deg.to_radians();
            let elev = if el > 0.0 { rng.gen_range(-el..el) } else { 0.0 };
            let roll = if ro > 0.0 { rng.gen_range(-ro..ro) } else { 0.0 };
            view_rotation(yaw, elev, roll)
        })
        .collect();
    let points = (0..spec.points)
        .map(|_| {
            let u: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
            shape.radial_point(u)
        })
        .collect();
    let translation = [0.0, 0.0, dist];
    let samples = poses
        .into_par_iter()
        .enumerate()
        .map(|(f, rotation)| {
            let (mask, dt, features) = render_view(spec, field, &shape, rotation, translation);
            TrainingSample {
                video_id: id.clone(),
                frame_id: f,
                features,
                mask,
                dt,
                rotation,
                translation,
                intrinsics: spec.intrinsics(),
            }
        })
        .collect();
    SynthVideo {
        record: VideoRecord {
            id,
            samples,
            points,
            normalization: Normalization::IDENTITY,
        },
        shape,
    }
}

/// Build the dataset in memory, in the raw (pre-canonical) frame.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<SynthVideo>, GroundTruthField)> {
    spec.validate()?;
    let field = GroundTruthField::new(spec.channels, spec.field_seed);
    let videos = (0..spec.videos).map(|i| gen_video(spec, &field, i)).collect();
    Ok((videos, field))
}

/// Canonicalized in-memory dataset, identical to what loading the written
/// directory produces.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(Dataset, Vec<Shape>, GroundTruthField)> {
    let (videos, field) = generate(spec)?;
    let mut shapes = Vec::new();
    let mut records = Vec::new();
    for v in videos {
        let mut r = v.record;
        r.canonicalize()?;
        records.push(r);
        shapes.push(v.shape);
    }
    Ok((
        Dataset {
            category: spec.category.clone(),
            videos: records,
        },
        shapes,
        field,
    ))
}

/// Write `<out>/<category>/<video>/...` plus `synth.json` and per-video
/// `shape.json` describing the ground truth. Returns the category dir.
pub fn gen_synthetic(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    let (videos, _) = generate(spec)?;
    let cat = out.join(&spec.category);
    std::fs::create_dir_all(&cat).map_err(|e| Error::io(&cat, e))?;
    let meta = cat.join("synth.json");
    std::fs::write(&meta, serde_json::to_string_pretty(spec).expect("plain struct"))
        .map_err(|e| Error::io(&meta, e))?;
    for v in &videos {
        write_video(&cat, &v.record)?;
        let p = cat.join(&v.record.id).join("shape.json");
        std::fs::write(&p, serde_json::to_string(&v.shape).expect("plain struct")).map_err(|e| Error::io(&p, e))?;
    }
    Ok(cat)
}

/// Read back the spec and shapes written by [`gen_synthetic`].
pub fn read_ground_truth(cat: &Path, video_ids: &[String]) -> Result<(SynthSpec, Vec<Shape>)> {
    let meta = cat.join("synth.json");
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::data(&meta, e.to_string()))?;
    let shapes = video_ids
        .iter()
        .map(|id| {
            let p = cat.join(id).join("shape.json");
            let t = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&t).map_err(|e| Error::data(&p, e.to_string()))
        })
        .collect::<Result<Vec<Shape>>>()?;
    Ok((spec, shapes))
}
