//! Dataset ingestion, validation, canonicalization and synthetic categories.

pub mod canonical;
pub mod dt;
pub mod formats;
pub mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use canonical::{canonicalize, Normalization};
pub use dt::distance_transform;
pub use formats::{FeatureMap, PoseRecord};

use crate::error::{Error, Result};
use crate::render::{CameraPose, Intrinsics, Mat3};

/// Largest tolerated `|R^T R - I|` entry.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

/// One posed view of an instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub video_id: String,
    pub frame_id: usize,
    pub features: FeatureMap,
    /// Row-major, 0 or 255.
    pub mask: Vec<u8>,
    /// Distance to the nearest background pixel, in pixels.
    pub dt: Vec<f32>,
    pub rotation: Mat3,
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
}

impl TrainingSample {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn camera(&self) -> CameraPose {
        CameraPose::from_matrix(&self.rotation, self.translation, self.intrinsics)
    }

    pub fn mask_bool(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m != 0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width() * self.height();
        let tag = || format!("{}/frame_{:05}", self.video_id, self.frame_id);
        if self.mask.len() != n || self.dt.len() != n {
            return Err(Error::Validation(format!("{}: mask/DT size differs from image size", tag())));
        }
        if let Some(v) = self.mask.iter().find(|&&m| m != 0 && m != 255) {
            return Err(Error::Validation(format!("{}: mask value {v} is not 0 or 255", tag())));
        }
        for (p, (&m, &d)) in self.mask.iter().zip(&self.dt).enumerate() {
            let ok = d.is_finite() && if m == 0 { d == 0.0 } else { d > 0.0 };
            if !ok {
                return Err(Error::Validation(format!(
                    "{}: distance transform {d} at pixel {p} disagrees with mask value {m}",
                    tag()
                )));
            }
        }
        let rec = PoseRecord {
            rotation: self.rotation,
            translation: self.translation,
            intrinsics: [0.0; 4],
        };
        let err = rec.orthonormality_error();
        if !(err < ORTHONORMAL_TOL) {
            return Err(Error::Validation(format!("{}: rotation is not orthonormal (error {err:e})", tag())));
        }
        let det = det3(&self.rotation);
        if det < 0.0 {
            return Err(Error::Validation(format!("{}: rotation is a reflection", tag())));
        }
        if self.translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("{}: non-finite translation", tag())));
        }
        self.intrinsics.validate().map_err(|e| Error::Validation(format!("{}: {e}", tag())))?;
        if self.features.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("{}: non-finite feature", tag())));
        }
        Ok(())
    }
}

fn det3(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// All views of one instance plus its canonical point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub samples: Vec<TrainingSample>,
    pub points: Vec<[f64; 3]>,
    /// Map from the on-disk object frame to the canonical one.
    pub normalization: Normalization,
}

impl VideoRecord {
    /// Put points and cameras into the canonical frame.
    pub fn canonicalize(&mut self) -> Result<()> {
        let poses: Vec<_> = self.samples.iter().map(|s| (s.rotation, s.translation)).collect();
        let (pts, poses, n) = canonicalize(&self.points, &poses)?;
        self.points = pts;
        for (s, (_, t)) in self.samples.iter_mut().zip(poses) {
            s.translation = t;
        }
        let prev = self.normalization;
        self.normalization = Normalization {
            center: prev.invert(n.center),
            scale: prev.scale * n.scale,
        };
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub category: String,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn sample_count(&self) -> usize {
        self.videos.iter().map(|v| v.samples.len()).sum()
    }

    pub fn samples(&self) -> impl Iterator<Item = (usize, &TrainingSample)> {
        self.videos.iter().enumerate().flat_map(|(v, r)| r.samples.iter().map(move |s| (v, s)))
    }

    /// Video indices split into `(train, holdout)`.
    pub fn split(&self, holdout: f64) -> (Vec<usize>, Vec<usize>) {
        let ids: Vec<&str> = self.videos.iter().map(|v| v.id.as_str()).collect();
        holdout_split(&ids, holdout)
    }
}

/// Deterministic video-level split: videos ordered by the SHA-256 of their
/// id, the first `ceil(frac * n)` (at least one, at most `n - 1`) held out.
pub fn holdout_split(ids: &[&str], frac: f64) -> (Vec<usize>, Vec<usize>) {
    let n = ids.len();
    let mut order: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (Sha256::digest(id.as_bytes()).to_vec(), i))
        .collect();
    order.sort();
    let k = if n < 2 {
        0
    } else {
        ((frac * n as f64).ceil() as usize).clamp(1, n - 1)
    };
    let mut hold: Vec<usize> = order[..k].iter().map(|x| x.1).collect();
    let mut train: Vec<usize> = order[k..].iter().map(|x| x.1).collect();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

pub fn frame_stem(frame: usize) -> String {
    format!("frame_{frame:05}")
}

fn sub(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn load_frame(dir: &Path, video: &str, frame: usize) -> Result<TrainingSample> {
    let stem = frame_stem(frame);
    let fp = sub(dir, &format!("{stem}.feat"));
    let features = FeatureMap::from_bytes(&formats::read_bytes(&fp)?).map_err(|m| Error::data(&fp, m))?;
    let mp = sub(dir, &format!("{stem}.mask.pgm"));
    let mask = formats::parse_pgm(&formats::read_bytes(&mp)?).map_err(|m| Error::data(&mp, m))?;
    let dp = sub(dir, &format!("{stem}.dt.f32"));
    let (dh, dw, dt) = formats::parse_dt(&formats::read_bytes(&dp)?).map_err(|m| Error::data(&dp, m))?;
    if (dh, dw) != (mask.height, mask.width) {
        return Err(Error::data(
            &dp,
            format!("size {dh}x{dw} differs from mask {}x{}", mask.height, mask.width),
        ));
    }
    let pp = sub(dir, &format!("{stem}.pose.txt"));
    let pose = PoseRecord::parse(&formats::read_text(&pp)?).map_err(|m| Error::data(&pp, m))?;
    let [fx, fy, cx, cy] = pose.intrinsics;
    let s = TrainingSample {
        video_id: video.to_string(),
        frame_id: frame,
        features,
        mask: mask.data,
        dt,
        rotation: pose.rotation,
        translation: pose.translation,
        intrinsics: Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width: mask.width,
            height: mask.height,
        },
    };
    s.validate().map_err(|e| Error::data(&fp, e.to_string()))?;
    Ok(s)
}

fn frame_ids(dir: &Path) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = e.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".feat")) {
            let id = num
                .parse::<usize>()
                .map_err(|_| Error::data(dir.join(name.as_ref()), "frame file name is not frame_NNNNN.feat"))?;
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Load, validate and canonicalize one video directory.
pub fn load_video(dir: &Path) -> Result<VideoRecord> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::data(dir, "video directory has no name"))?;
    let frames = frame_ids(dir)?;
    if frames.is_empty() {
        return Err(Error::data(dir, "video has no frames"));
    }
    let samples = frames
        .par_iter()
        .map(|&f| load_frame(dir, &id, f))
        .collect::<Result<Vec<_>>>()?;
    let pp = dir.join("points.xyz");
    let points = formats::parse_xyz(&formats::read_text(&pp)?).map_err(|m| Error::data(&pp, m))?;
    let mut v = VideoRecord {
        id,
        samples,
        points,
        normalization: Normalization::IDENTITY,
    };
    v.canonicalize().map_err(|e| Error::data(&pp, e.to_string()))?;
    Ok(v)
}

/// Load `<root>/<category>/<video>/...`.
pub fn load_dataset(root: &Path, category: &str) -> Result<Dataset> {
    let cat = root.join(category);
    let mut dirs = Vec::new();
    for e in std::fs::read_dir(&cat).map_err(|e| Error::io(&cat, e))? {
        let e = e.map_err(|e| Error::io(&cat, e))?;
        if e.file_type().map_err(|err| Error::io(e.path(), err))?.is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(&cat, "dataset is empty: no video directories"));
    }
    let videos = dirs.iter().map(|d| load_video(d)).collect::<Result<Vec<_>>>()?;
    log::info!(
        "loaded {} videos, {} frames from {}",
        videos.len(),
        videos.iter().map(|v| v.samples.len()).sum::<usize>(),
        cat.display()
    );
    Ok(Dataset {
        category: category.to_string(),
        videos,
    })
}

/// Write one sample in the on-disk layout (raw frame, no canonicalization).
pub fn write_sample(dir: &Path, s: &TrainingSample) -> Result<()> {
    let stem = frame_stem(s.frame_id);
    formats::write_bytes(&dir.join(format!("{stem}.feat")), &s.features.to_bytes())?;
    let g = formats::Gray {
        width: s.width(),
        height: s.height(),
        data: s.mask.clone(),
    };
    formats::write_bytes(&dir.join(format!("{stem}.mask.pgm")), &formats::pgm_bytes(&g))?;
    formats::write_bytes(&dir.join(format!("{stem}.dt.f32")), &formats::dt_bytes(s.height(), s.width(), &s.dt))?;
    let k = s.intrinsics;
    let rec = PoseRecord {
        rotation: s.rotation,
        translation: s.translation,
        intrinsics: [k.fx, k.fy, k.cx, k.cy],
    };
    formats::write_bytes(&dir.join(format!("{stem}.pose.txt")), rec.to_text().as_bytes())
}

pub fn write_video(root: &Path, v: &VideoRecord) -> Result<()> {
    let dir = root.join(&v.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for s in &v.samples {
        write_sample(&dir, s)?;
    }
    formats::write_bytes(&dir.join("points.xyz"), formats::xyz_text(&v.points).as_bytes())
}
