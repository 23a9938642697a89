//! Camera model and differentiable rendering.
//!
//! Camera frame follows the usual vision convention: `x` right, `y` down,
//! `z` forward; `X_cam = R X + t`. Pixel `(row i, col j)` covers
//! `[j, j+1) x [i, i+1)` in continuous image coordinates, so its center sits
//! at `(j + 0.5, i + 0.5)`. Normalized device distances are pixel distances
//! times `2 / W`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::{CustomOp, Real, Tape, Tensor, Var};

pub type Mat3 = [[f64; 3]; 3];

/// Pinhole intrinsics and image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Same camera at a different resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Intrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Pixel length in normalized device units.
    pub fn ndc_per_pixel(&self) -> f64 {
        2.0 / self.width as f64
    }
}

/// Object-to-camera rigid transform plus intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    /// Axis-angle, angle in `[0, pi]`.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn from_matrix(r: &Mat3, translation: [f64; 3], intrinsics: Intrinsics) -> Self {
        CameraPose {
            rotation: matrix_to_axis_angle(r),
            translation,
            intrinsics,
        }
    }

    pub fn matrix(&self) -> Mat3 {
        axis_angle_to_matrix(self.rotation)
    }

    /// Pixel coordinates and depth of a point.
    pub fn project_point(&self, p: [f64; 3]) -> ([f64; 2], f64) {
        let r = self.matrix();
        let c = transform(&r, self.translation, p);
        let k = &self.intrinsics;
        ([k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy], c[2])
    }
}

pub fn transform(r: &Mat3, t: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let mut o = t;
    for i in 0..3 {
        for j in 0..3 {
            o[i] += r[i][j] * p[j];
        }
    }
    o
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

pub fn mat_transpose(a: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
    }
    o
}

fn skew(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// Rodrigues coefficients `a = sin t / t`, `b = (1 - cos t) / t^2` and
/// their derivatives divided by `t`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 1e-2 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 + 2.0 * c) / (t2 * t2),
        )
    }
}

pub fn axis_angle_to_matrix(w: [f64; 3]) -> Mat3 {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = f64::from(i == j) + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Derivatives `dR / dw_i`.
fn axis_angle_jacobian(w: [f64; 3]) -> [Mat3; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, c, d) = rodrigues_coeffs(theta);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(e);
        let eik = mat_mul(&ei, &k);
        let kei = mat_mul(&k, &ei);
        for r in 0..3 {
            for s in 0..3 {
                o[r][s] = c * w[i] * k[r][s] + a * ei[r][s] + d * w[i] * k2[r][s] + b * (eik[r][s] + kei[r][s]);
            }
        }
    }
    out
}

pub fn matrix_to_axis_angle(r: &Mat3) -> [f64; 3] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-6 {
        return [v[0] / 2.0, v[1] / 2.0, v[2] / 2.0];
    }
    if std::f64::consts::PI - theta > 1e-4 {
        let s = theta / (2.0 * theta.sin());
        return [v[0] * s, v[1] * s, v[2] * s];
    }
    // near pi: axis from the largest diagonal of (R + I) / 2
    let b = |i: usize, j: usize| (r[i][j] + f64::from(i == j)) / 2.0;
    let i = (0..3).max_by(|&x, &y| b(x, x).total_cmp(&b(y, y))).unwrap();
    let mut axis = [0.0; 3];
    let di = b(i, i).max(0.0).sqrt();
    for (j, a) in axis.iter_mut().enumerate() {
        *a = if j == i { di } else { b(i, j) / di };
    }
    // resolve the sign from the antisymmetric part where it is informative
    if axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2] < 0.0 {
        axis.iter_mut().for_each(|a| *a = -*a);
    }
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    [axis[0] / n * theta, axis[1] / n * theta, axis[2] / n * theta]
}

/// Angle between two rotations in degrees.
pub fn geodesic_error_deg(r1: &Mat3, r2: &Mat3) -> f64 {
    let mut tr = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            tr += r1[j][i] * r2[j][i];
        }
    }
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

struct RotationOp {
    w: [f64; 3],
}

impl<T: Real> CustomOp<T> for RotationOp {
    fn name(&self) -> &'static str {
        "axis_angle_to_matrix"
    }

    fn backward(&self, grad: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let jac = axis_angle_jacobian(self.w);
        let g: Vec<T> = jac
            .iter()
            .map(|j| {
                let mut s = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        s += j[r][c] * grad.data()[3 * r + c].f64();
                    }
                }
                T::c(s)
            })
            .collect();
        vec![Some(Tensor::vector(g))]
    }
}

/// Rotation matrix `[3, 3]` from an axis-angle var `[3]`.
pub fn rotation_var<T: Real>(tape: &mut Tape<T>, w: Var) -> Var {
    let v = tape.value(w);
    assert_eq!(v.len(), 3, "axis-angle must have 3 entries");
    let w3 = [v.data()[0].f64(), v.data()[1].f64(), v.data()[2].f64()];
    let r = axis_angle_to_matrix(w3);
    let out = Tensor::from_f64(&[3, 3], &r.concat()).expect("shape");
    tape.custom(&[w], out, Box::new(RotationOp { w: w3 }))
}

/// Smallest depth accepted in front of the camera.
pub const Z_NEAR: f64 = 1e-3;

struct PerspectiveOp {
    fx: f64,
    fy: f64,
}

impl<T: Real> CustomOp<T> for PerspectiveOp {
    fn name(&self) -> &'static str {
        "perspective"
    }

    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let n = x.rows();
        let mut g = vec![T::zero(); 3 * n];
        for i in 0..n {
            let p = x.row(i);
            let (px, py, pz) = (p[0].f64(), p[1].f64(), p[2].f64());
            let (gu, gv) = (grad.data()[2 * i].f64(), grad.data()[2 * i + 1].f64());
            g[3 * i] = T::c(gu * self.fx / pz);
            g[3 * i + 1] = T::c(gv * self.fy / pz);
            g[3 * i + 2] = T::c(-(gu * self.fx * px + gv * self.fy * py) / (pz * pz));
        }
        vec![Some(Tensor::new(vec![n, 3], g).expect("shape"))]
    }
}

/// Projected vertices.
pub struct Projection {
    /// `[N, 2]` pixel coordinates on the tape.
    pub uv: Var,
    /// Camera-frame depth per vertex.
    pub depth: Vec<f64>,
}

/// Project `[N, 3]` object-frame vertices with rotation var `[3, 3]`.
pub fn project<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    rotation: Var,
    translation: [f64; 3],
    k: &Intrinsics,
) -> Result<Projection> {
    let c = tape.matmul_bt(v, rotation);
    let t = tape.constant(Tensor::from_f64(&[3], &translation).expect("shape"));
    let c = tape.add_row(c, t);
    let cv = tape.value(c);
    let n = cv.rows();
    let mut uv = Vec::with_capacity(2 * n);
    let mut depth = Vec::with_capacity(n);
    for i in 0..n {
        let p = cv.row(i);
        let (x, y, z) = (p[0].f64(), p[1].f64(), p[2].f64());
        if !(z > Z_NEAR) {
            return Err(Error::Render(format!("vertex {i} is behind the camera (z = {z})")));
        }
        uv.push(T::c(k.fx * x / z + k.cx));
        uv.push(T::c(k.fy * y / z + k.cy));
        depth.push(z);
    }
    let out = Tensor::new(vec![n, 2], uv).expect("shape");
    let uv = tape.custom(&[c], out, Box::new(PerspectiveOp { fx: k.fx, fy: k.fy }));
    Ok(Projection { uv, depth })
}

#[inline]
fn cross2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Partial derivatives of [`cross2`] with respect to `a`, `b`, `c`.
#[inline]
fn cross2_grad(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [[f64; 2]; 3] {
    [
        [b[1] - c[1], c[0] - b[0]],
        [c[1] - a[1], a[0] - c[0]],
        [a[1] - b[1], b[0] - a[0]],
    ]
}

/// Screen-space barycentrics of `p`, `None` for degenerate triangles.
pub fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let area = cross2(a, b, c);
    if area.abs() < 1e-12 {
        return None;
    }
    Some([cross2(p, b, c) / area, cross2(a, p, c) / area, cross2(a, b, p) / area])
}

/// `d b_k / d (a, b, c)` for the barycentrics of a fixed point.
fn barycentric_grad(p: [f64; 2], t: [[f64; 2]; 3]) -> [[[f64; 2]; 3]; 3] {
    let [a, b, c] = t;
    let area = cross2(a, b, c);
    let ga = cross2_grad(a, b, c);
    let e = [cross2(p, b, c), cross2(a, p, c), cross2(a, b, p)];
    // d e_k / d vertex, with p held fixed
    let g0 = cross2_grad(p, b, c);
    let g1 = cross2_grad(a, p, c);
    let g2 = cross2_grad(a, b, p);
    let de = [
        [[0.0, 0.0], g0[1], g0[2]],
        [g1[0], [0.0, 0.0], g1[2]],
        [g2[0], g2[1], [0.0, 0.0]],
    ];
    let mut out = [[[0.0; 2]; 3]; 3];
    for k in 0..3 {
        for v in 0..3 {
            for d in 0..2 {
                out[k][v][d] = (de[k][v][d] * area - e[k] * ga[v][d]) / (area * area);
            }
        }
    }
    out
}

/// Distance from `p` to segment `ab` and its gradient with respect to `a`, `b`.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, [[f64; 2]; 2]) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let r = [p[0] - q[0], p[1] - q[1]];
    let d = (r[0] * r[0] + r[1] * r[1]).sqrt();
    if d < 1e-12 {
        return (d, [[0.0; 2]; 2]);
    }
    let u = [r[0] / d, r[1] / d];
    (d, [[-(1.0 - t) * u[0], -(1.0 - t) * u[1]], [-t * u[0], -t * u[1]]])
}

/// Signed distance from `p` to a triangle boundary (positive inside) and
/// its gradient with respect to the three corners.
pub fn signed_distance(p: [f64; 2], tri: [[f64; 2]; 3]) -> (f64, [[f64; 2]; 3]) {
    let area = cross2(tri[0], tri[1], tri[2]);
    let inside = area.abs() >= 1e-12 && {
        let s = area.signum();
        (0..3).all(|k| s * cross2(tri[k], tri[(k + 1) % 3], p) >= 0.0)
    };
    let mut best = (f64::INFINITY, 0usize, [[0.0; 2]; 2]);
    for k in 0..3 {
        let (d, g) = segment_distance(p, tri[k], tri[(k + 1) % 3]);
        if d < best.0 {
            best = (d, k, g);
        }
    }
    let (d, k, g) = best;
    let sign = if inside { 1.0 } else { -1.0 };
    let mut grad = [[0.0; 2]; 3];
    for (slot, gi) in [k, (k + 1) % 3].into_iter().zip(g) {
        grad[slot] = [sign * gi[0], sign * gi[1]];
    }
    (sign * d, grad)
}

fn pixel_center(i: usize, j: usize) -> [f64; 2] {
    [j as f64 + 0.5, i as f64 + 0.5]
}

fn uv_points<T: Real>(uv: &Tensor<T>) -> Vec<[f64; 2]> {
    uv.data().chunks(2).map(|p| [p[0].f64(), p[1].f64()]).collect()
}

fn tri_of(pts: &[[f64; 2]], f: &[u32; 3]) -> [[f64; 2]; 3] {
    [pts[f[0] as usize], pts[f[1] as usize], pts[f[2] as usize]]
}

/// Hard visibility: nearest face and barycentrics per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Visible face per pixel, `-1` for background.
    pub face_id: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Raster {
    pub fn covered(&self, p: usize) -> bool {
        self.face_id[p] >= 0
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.face_id.iter().map(|&f| f >= 0).collect()
    }

    /// Vertex with the largest barycentric weight at pixel `p`.
    pub fn dominant_vertex(&self, p: usize, faces: &[[u32; 3]]) -> Option<u32> {
        let f = *self.face_id.get(p)?;
        if f < 0 {
            return None;
        }
        let b = self.bary[p];
        let k = (0..3).fold(0, |m, k| if b[k] > b[m] { k } else { m });
        Some(faces[f as usize][k])
    }
}

/// Z-buffer rasterization at pixel centers. Depth is interpolated in
/// inverse depth; on equal depth the lower face id wins.
pub fn rasterize(uv: &[[f64; 2]], depth: &[f64], faces: &[[u32; 3]], width: usize, height: usize) -> Raster {
    let n = width * height;
    let mut r = Raster {
        width,
        height,
        face_id: vec![-1; n],
        bary: vec![[0.0; 3]; n],
        depth: vec![f64::INFINITY; n],
    };
    for (fi, f) in faces.iter().enumerate() {
        let t = tri_of(uv, f);
        let (lo, hi) = bbox(&t, 0.0);
        let Some((i0, i1, j0, j1)) = pixel_range(lo, hi, width, height) else { continue };
        for i in i0..i1 {
            for j in j0..j1 {
                let p = pixel_center(i, j);
                let Some(b) = barycentric(p, t[0], t[1], t[2]) else { continue };
                if b.iter().any(|&x| x < 0.0) {
                    continue;
                }
                let inv: f64 = (0..3).map(|k| b[k] / depth[f[k] as usize]).sum();
                let z = 1.0 / inv;
                let idx = i * width + j;
                if z < r.depth[idx] {
                    r.depth[idx] = z;
                    r.face_id[idx] = fi as i32;
                    r.bary[idx] = b;
                }
            }
        }
    }
    r
}

fn bbox(t: &[[f64; 2]; 3], margin: f64) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in t {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    ([lo[0] - margin, lo[1] - margin], [hi[0] + margin, hi[1] + margin])
}

/// Rows `i0..i1`, cols `j0..j1` whose centers may fall inside `[lo, hi]`.
fn pixel_range(lo: [f64; 2], hi: [f64; 2], width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let cl = |x: f64, n: usize| x.clamp(0.0, n as f64) as usize;
    let j0 = cl((lo[0] - 0.5).ceil(), width);
    let j1 = cl((hi[0] - 0.5).floor() + 1.0, width);
    let i0 = cl((lo[1] - 0.5).ceil(), height);
    let i1 = cl((hi[1] - 0.5).floor() + 1.0, height);
    (i0 < i1 && j0 < j1).then_some((i0, i1, j0, j1))
}

/// Soft silhouette settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftMaskParams {
    /// Sharpness in normalized device units.
    pub gamma: f64,
    /// Faces combined per pixel.
    pub top_k: usize,
}

impl Default for SoftMaskParams {
    fn default() -> Self {
        SoftMaskParams { gamma: 1e-2, top_k: 8 }
    }
}

/// Faces farther outside than this many `gamma` are ignored.
const SOFT_MARGIN: f64 = 10.0;

struct SoftTerm {
    face: u32,
    coef: f64,
    grad: [[f64; 2]; 3],
}

struct SoftMaskOp {
    faces: Arc<Vec<[u32; 3]>>,
    terms: Vec<Vec<SoftTerm>>,
}

impl<T: Real> CustomOp<T> for SoftMaskOp {
    fn name(&self) -> &'static str {
        "soft_mask"
    }

    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let n = inputs[0].rows();
        let mut g = vec![0.0f64; 2 * n];
        for (p, terms) in self.terms.iter().enumerate() {
            let gp = grad.data()[p].f64();
            if gp == 0.0 {
                continue;
            }
            for t in terms {
                let f = self.faces[t.face as usize];
                for k in 0..3 {
                    let v = f[k] as usize;
                    g[2 * v] += gp * t.coef * t.grad[k][0];
                    g[2 * v + 1] += gp * t.coef * t.grad[k][1];
                }
            }
        }
        vec![Some(Tensor::new(vec![n, 2], g.into_iter().map(T::c).collect()).expect("shape"))]
    }
}

/// `1 - prod(1 - sigmoid(d_f / gamma))` over the `top_k` faces with the
/// largest signed distance at each pixel center. Returns `[H*W]`.
pub fn soft_mask<T: Real>(
    tape: &mut Tape<T>,
    uv: Var,
    faces: &Arc<Vec<[u32; 3]>>,
    k: &Intrinsics,
    params: SoftMaskParams,
) -> Var {
    let (w, h) = (k.width, k.height);
    let pts = uv_points(tape.value(uv));
    let scale = k.ndc_per_pixel();
    let margin_px = SOFT_MARGIN * params.gamma / scale;
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); w * h];
    for (fi, f) in faces.iter().enumerate() {
        let (lo, hi) = bbox(&tri_of(&pts, f), margin_px);
        if let Some((i0, i1, j0, j1)) = pixel_range(lo, hi, w, h) {
            for i in i0..i1 {
                for j in j0..j1 {
                    bins[i * w + j].push(fi as u32);
                }
            }
        }
    }
    let want_grad = tape.requires_grad(uv);
    let mut out = vec![T::zero(); w * h];
    let mut terms: Vec<Vec<SoftTerm>> = Vec::with_capacity(if want_grad { w * h } else { 0 });
    let mut cand: Vec<(f64, u32, [[f64; 2]; 3])> = Vec::new();
    for (idx, bin) in bins.iter().enumerate() {
        let p = pixel_center(idx / w, idx % w);
        cand.clear();
        for &fi in bin {
            let (d, g) = signed_distance(p, tri_of(&pts, &faces[fi as usize]));
            cand.push((d * scale, fi, g));
        }
        // stable: equal distances keep face order
        cand.sort_by(|a, b| b.0.total_cmp(&a.0));
        cand.truncate(params.top_k);
        let sig: Vec<f64> = cand.iter().map(|c| sigmoid(c.0 / params.gamma)).collect();
        let keep: f64 = sig.iter().map(|s| 1.0 - s).product();
        out[idx] = T::c(1.0 - keep);
        if want_grad {
            let mut pix = Vec::with_capacity(cand.len());
            for (a, c) in cand.iter().enumerate() {
                let others: f64 = sig.iter().enumerate().filter(|&(b, _)| b != a).map(|(_, s)| 1.0 - s).product();
                let coef = others * sig[a] * (1.0 - sig[a]) / params.gamma * scale;
                if coef != 0.0 {
                    pix.push(SoftTerm {
                        face: c.1,
                        coef,
                        grad: c.2,
                    });
                }
            }
            terms.push(pix);
        }
    }
    let op = SoftMaskOp {
        faces: faces.clone(),
        terms,
    };
    tape.custom(&[uv], Tensor::vector(out), Box::new(op))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Barycentrics of pixel `p` in its visible face at the current positions.
fn pixel_bary(raster: &Raster, p: usize, pts: &[[f64; 2]], f: &[u32; 3]) -> [f64; 3] {
    let t = tri_of(pts, f);
    barycentric(pixel_center(p / raster.width, p % raster.width), t[0], t[1], t[2]).unwrap_or(raster.bary[p])
}

struct FeatureRenderOp {
    faces: Arc<Vec<[u32; 3]>>,
    raster: Arc<Raster>,
}

impl<T: Real> CustomOp<T> for FeatureRenderOp {
    fn name(&self) -> &'static str {
        "render_features"
    }

    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (uv, feats) = (inputs[0], inputs[1]);
        let d = feats.cols();
        let pts = uv_points(uv);
        let mut guv = vec![0.0f64; uv.len()];
        let mut gf = vec![T::zero(); feats.len()];
        let w = self.raster.width;
        for (p, &fid) in self.raster.face_id.iter().enumerate() {
            if fid < 0 {
                continue;
            }
            let f = self.faces[fid as usize];
            let b = pixel_bary(&self.raster, p, &pts, &f);
            let gp = &grad.data()[p * d..(p + 1) * d];
            let mut dots = [0.0; 3];
            for k in 0..3 {
                let fv = feats.row(f[k] as usize);
                let row = &mut gf[f[k] as usize * d..(f[k] as usize + 1) * d];
                let bk = T::c(b[k]);
                for c in 0..d {
                    row[c] += bk * gp[c];
                    dots[k] += (gp[c] * fv[c]).f64();
                }
            }
            let jb = barycentric_grad(pixel_center(p / w, p % w), tri_of(&pts, &f));
            for k in 0..3 {
                for v in 0..3 {
                    for e in 0..2 {
                        guv[2 * f[v] as usize + e] += dots[k] * jb[k][v][e];
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(uv.shape().to_vec(), guv.into_iter().map(T::c).collect()).expect("shape")),
            Some(Tensor::new(feats.shape().to_vec(), gf).expect("shape")),
        ]
    }
}

/// Barycentric blend of vertex features `[N, D]` at each covered pixel;
/// `[H*W, D]`, zero rows on background. Visibility is taken from `raster`.
pub fn render_features<T: Real>(
    tape: &mut Tape<T>,
    uv: Var,
    feats: Var,
    faces: &Arc<Vec<[u32; 3]>>,
    raster: &Arc<Raster>,
) -> Var {
    let fv = tape.value(feats);
    let pts = uv_points(tape.value(uv));
    let d = fv.cols();
    let mut out = vec![T::zero(); raster.face_id.len() * d];
    for (p, &fid) in raster.face_id.iter().enumerate() {
        if fid < 0 {
            continue;
        }
        let f = faces[fid as usize];
        let b = pixel_bary(raster, p, &pts, &f);
        let row = &mut out[p * d..(p + 1) * d];
        for k in 0..3 {
            let bk = T::c(b[k]);
            for (o, &x) in row.iter_mut().zip(fv.row(f[k] as usize)) {
                *o += bk * x;
            }
        }
    }
    let out = Tensor::new(vec![raster.face_id.len(), d], out).expect("shape");
    let op = FeatureRenderOp {
        faces: faces.clone(),
        raster: raster.clone(),
    };
    tape.custom(&[uv, feats], out, Box::new(op))
}

/// Everything one view of a mesh produces.
pub struct RenderOut {
    pub projection: Projection,
    pub raster: Arc<Raster>,
    /// `[H*W]` soft silhouette.
    pub soft_mask: Var,
}

/// Project, rasterize and build the soft silhouette of `[N, 3]` vertices.
pub fn render_mesh<T: Real>(
    tape: &mut Tape<T>,
    vertices: Var,
    faces: &Arc<Vec<[u32; 3]>>,
    rotation: Var,
    translation: [f64; 3],
    k: &Intrinsics,
    params: SoftMaskParams,
) -> Result<RenderOut> {
    k.validate()?;
    let projection = project(tape, vertices, rotation, translation, k)?;
    let pts = uv_points(tape.value(projection.uv));
    let raster = Arc::new(rasterize(&pts, &projection.depth, faces, k.width, k.height));
    let soft_mask = soft_mask(tape, projection.uv, faces, k, params);
    Ok(RenderOut {
        projection,
        raster,
        soft_mask,
    })
}

/// Per-vertex distribution over sampled vertices plus a background slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceProb {
    pub sample_ids: Vec<usize>,
    /// `[N, K]` rows summing to one.
    pub table: Tensor<f64>,
}

impl SurfaceProb {
    pub fn slots(&self) -> usize {
        self.sample_ids.len() + 1
    }

    /// `[H*W, K+1]` map: the dominant vertex's row on covered pixels,
    /// one-hot background elsewhere.
    pub fn render<T: Real>(&self, raster: &Raster, faces: &[[u32; 3]]) -> Result<Tensor<T>> {
        let k = self.sample_ids.len();
        if k == 0 {
            return Err(Error::Invalid("surface probability needs sampled vertices".into()));
        }
        let p = raster.face_id.len();
        let mut out = vec![T::zero(); p * (k + 1)];
        for (i, row) in out.chunks_mut(k + 1).enumerate() {
            match raster.dominant_vertex(i, faces) {
                Some(v) => {
                    for (o, &x) in row.iter_mut().zip(self.table.row(v as usize)) {
                        *o = T::c(x);
                    }
                }
                None => row[k] = T::one(),
            }
        }
        Tensor::new(vec![p, k + 1], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::check_gradients;

    fn intr(w: usize) -> Intrinsics {
        Intrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: w as f64 / 2.0,
            cy: w as f64 / 2.0,
            width: w,
            height: w,
        }
    }

    #[test]
    fn rodrigues_round_trip_and_geodesic() {
        for w in [[0.3, -0.2, 0.5], [0.0, 0.0, 1e-4], [3.1, 0.1, -0.05], [0.0, 0.0, std::f64::consts::PI]] {
            let r = axis_angle_to_matrix(w);
            let back = axis_angle_to_matrix(matrix_to_axis_angle(&r));
            assert!(geodesic_error_deg(&r, &back) < 1e-5, "{w:?}");
            let rtr = mat_mul(&mat_transpose(&r), &r);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((rtr[i][j] - f64::from(i == j)).abs() < 1e-12);
                }
            }
        }
        let rz = axis_angle_to_matrix([0.0, 0.0, std::f64::consts::PI]);
        let id = axis_angle_to_matrix([0.0; 3]);
        assert!((geodesic_error_deg(&rz, &id) - 180.0).abs() < 1e-9);
        assert_eq!(geodesic_error_deg(&id, &id), 0.0);
    }

    #[test]
    fn rotation_op_gradient() {
        for w in [[0.3, -0.7, 0.2], [1e-4, 2e-4, -1e-4]] {
            let c = Tensor::from_f64(&[3, 3], &[1.0, -0.5, 0.3, 0.2, 0.9, -1.1, 0.4, 0.7, 0.1]).unwrap();
            let err = check_gradients(
                &|t, v| {
                    let r = rotation_var(t, v[0]);
                    let cv = t.constant(c.clone());
                    let m = t.mul(r, cv);
                    t.sum(m)
                },
                &[Tensor::from_f64(&[3], &w).unwrap()],
                1e-6,
            );
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn projection_gradient() {
        let k = intr(32);
        let err = check_gradients(
            &|t, v| {
                let r = rotation_var(t, v[1]);
                let p = project(t, v[0], r, [0.1, -0.2, 4.0], &k).unwrap();
                let s = t.square(p.uv);
                t.sum(s)
            },
            &[
                Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.1]).unwrap(),
                Tensor::from_f64(&[3], &[0.2, 0.1, -0.3]).unwrap(),
            ],
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn behind_camera_is_an_error() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::from_f64(&[1, 3], &[0.0, 0.0, -5.0]).unwrap());
        let r = t.constant(Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(matches!(project(&mut t, v, r, [0.0, 0.0, 1.0], &intr(8)), Err(Error::Render(_))));
    }

    #[test]
    fn large_triangle_covers_center() {
        let uv = [[-10.0, -10.0], [40.0, -10.0], [-10.0, 40.0]];
        let r = rasterize(&uv, &[1.0; 3], &[[0, 1, 2]], 8, 8);
        let p = 3 * 8 + 3;
        assert_eq!(r.face_id[p], 0);
        assert!((r.bary[p].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut t = Tape::<f64>::new();
        let uvv = t.constant(Tensor::from_f64(&[3, 2], &uv.concat()).unwrap());
        let m = soft_mask(&mut t, uvv, &Arc::new(vec![[0, 1, 2]]), &intr(8), SoftMaskParams::default());
        assert!(t.value(m).data()[p] > 0.999);
    }

    #[test]
    fn empty_mesh_renders_background() {
        let r = rasterize(&[], &[], &[], 4, 4);
        assert!(r.face_id.iter().all(|&f| f == -1));
        let mut t = Tape::<f64>::new();
        let uvv = t.constant(Tensor::zeros(&[0, 2]));
        let m = soft_mask(&mut t, uvv, &Arc::new(vec![]), &intr(4), SoftMaskParams::default());
        assert!(t.value(m).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nearer_face_wins_and_ties_go_to_lower_id() {
        let uv = [[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]];
        let faces = [[0, 1, 2], [3, 4, 5]];
        let pts: Vec<[f64; 2]> = uv.iter().chain(uv.iter()).copied().collect();
        let r = rasterize(&pts, &[2.0, 2.0, 2.0, 1.0, 1.0, 1.0], &faces, 8, 8);
        assert_eq!(r.face_id[0], 1);
        let r = rasterize(&pts, &[1.0; 6], &faces, 8, 8);
        assert_eq!(r.face_id[0], 0);
    }

    #[test]
    fn feature_render_shifts_with_geometry() {
        let faces = Arc::new(vec![[0u32, 1, 2]]);
        let feats = Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let render = |dx: f64| {
            let uv = [[1.25 + dx, 1.5], [6.5 + dx, 2.0], [2.0 + dx, 6.75]];
            let r = Arc::new(rasterize(&uv, &[1.0; 3], &faces, 10, 8));
            let mut t = Tape::<f64>::new();
            let u = t.constant(Tensor::from_f64(&[3, 2], &uv.concat()).unwrap());
            let f = t.constant(feats.clone());
            let o = render_features(&mut t, u, f, &faces, &r);
            t.value(o).clone()
        };
        let (a, b) = (render(0.0), render(1.0));
        for i in 0..8 {
            for j in 0..9 {
                assert_eq!(a.row(i * 10 + j), b.row(i * 10 + j + 1));
            }
        }
    }

    #[test]
    fn soft_mask_gradient_two_triangles() {
        let k = intr(8);
        let faces = Arc::new(vec![[0u32, 1, 2], [1, 3, 2]]);
        let params = SoftMaskParams { gamma: 0.1, top_k: 8 };
        let err = check_gradients(
            &|t, v| {
                let m = soft_mask(t, v[0], &faces, &k, params);
                let c = t.constant(Tensor::from_f64(&[64], &(0..64).map(|i| ((i * 7) % 5) as f64 - 2.0).collect::<Vec<_>>()).unwrap());
                let p = t.mul(m, c);
                t.sum(p)
            },
            &[Tensor::from_f64(&[4, 2], &[1.3, 1.1, 6.2, 1.7, 1.9, 6.4, 6.6, 5.8]).unwrap()],
            1e-6,
        );
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn feature_render_gradient() {
        let faces = Arc::new(vec![[0u32, 1, 2], [1, 3, 2]]);
        let uv0 = Tensor::from_f64(&[4, 2], &[1.3, 1.1, 6.2, 1.7, 1.9, 6.4, 6.6, 5.8]).unwrap();
        let pts = uv_points(&uv0);
        let raster = Arc::new(rasterize(&pts, &[1.0; 4], &faces, 8, 8));
        let err = check_gradients(
            &|t, v| {
                let o = render_features(t, v[0], v[1], &faces, &raster);
                let s = t.square(o);
                t.sum(s)
            },
            &[uv0.clone(), Tensor::from_f64(&[4, 2], &[0.1, 0.9, -0.3, 0.4, 0.7, 0.2, 0.5, -0.6]).unwrap()],
            1e-6,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn barycentric_grad_matches_fd() {
        let t = [[1.3, 1.1], [6.2, 1.7], [1.9, 6.4]];
        let p = [2.5, 3.5];
        let g = barycentric_grad(p, t);
        let h = 1e-6;
        for v in 0..3 {
            for e in 0..2 {
                let mut tp = t;
                tp[v][e] += h;
                let mut tm = t;
                tm[v][e] -= h;
                let bp = barycentric(p, tp[0], tp[1], tp[2]).unwrap();
                let bm = barycentric(p, tm[0], tm[1], tm[2]).unwrap();
                for k in 0..3 {
                    let num = (bp[k] - bm[k]) / (2.0 * h);
                    assert!((num - g[k][v][e]).abs() < 1e-6, "k{k} v{v} e{e}: {num} vs {}", g[k][v][e]);
                }
            }
        }
    }

    #[test]
    fn surface_prob_background_is_one_hot() {
        let sp = SurfaceProb {
            sample_ids: vec![0, 1],
            table: Tensor::from_f64(&[3, 2], &[0.7, 0.3, 0.2, 0.8, 0.5, 0.5]).unwrap(),
        };
        let r = rasterize(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], &[1.0; 3], &[[0, 1, 2]], 4, 4);
        let m: Tensor<f64> = sp.render(&r, &[[0, 1, 2]]).unwrap();
        assert_eq!(m.row(15), &[0.0, 0.0, 1.0]);
        assert_eq!(m.row(0), &[0.7, 0.3, 0.0]);
        for i in 0..16 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn signed_distance_sign() {
        let t = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        assert!((signed_distance([1.0, 1.0], t).0 - 1.0).abs() < 1e-12);
        assert!((signed_distance([-1.0, 1.0], t).0 + 1.0).abs() < 1e-12);
        let rev = [t[0], t[2], t[1]];
        assert!((signed_distance([1.0, 1.0], rev).0 - 1.0).abs() < 1e-12);
    }
}
