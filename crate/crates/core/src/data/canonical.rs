//! Canonical object frame: bounding box centered at the origin, longest
//! half-extent equal to one.

use crate::error::{Error, Result};
use crate::render::{transform, Mat3};

/// Similarity taking raw object coordinates to canonical ones,
/// `x' = scale * (x - center)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn of(points: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("cannot canonicalize an empty point cloud".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
        if !(half > 0.0) || !half.is_finite() {
            return Err(Error::Invalid("point cloud has zero extent".into()));
        }
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        Ok(Normalization {
            center,
            scale: 1.0 / half,
        })
    }

    fn is_identity(&self, tol: f64) -> bool {
        (self.scale - 1.0).abs() <= tol && self.center.iter().all(|c| c.abs() <= tol)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.center;
        [
            self.scale * (p[0] - c[0]),
            self.scale * (p[1] - c[1]),
            self.scale * (p[2] - c[2]),
        ]
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.center;
        [p[0] / self.scale + c[0], p[1] / self.scale + c[1], p[2] / self.scale + c[2]]
    }

    /// Extrinsics that see canonical points where `(r, t)` saw raw ones.
    pub fn adjust_pose(&self, r: &Mat3, t: [f64; 3]) -> [f64; 3] {
        let moved = transform(r, t, self.center);
        moved.map(|x| self.scale * x)
    }
}

/// Canonicalize a cloud and the extrinsics observing it. Projections are
/// unchanged; camera-frame depths scale by the same factor as the cloud.
/// A cloud that is already canonical is returned untouched.
pub fn canonicalize(
    points: &[[f64; 3]],
    poses: &[(Mat3, [f64; 3])],
) -> Result<(Vec<[f64; 3]>, Vec<(Mat3, [f64; 3])>, Normalization)> {
    let n = Normalization::of(points)?;
    if n.is_identity(1e-9) {
        return Ok((points.to_vec(), poses.to_vec(), Normalization::IDENTITY));
    }
    let pts = points.iter().map(|&p| n.apply(p)).collect();
    let ps = poses.iter().map(|(r, t)| (*r, n.adjust_pose(r, *t))).collect();
    Ok((pts, ps, n))
}
