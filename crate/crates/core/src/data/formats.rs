//! On-disk formats of a dataset frame.
//!
//! * `.feat`: magic `CF3D`, then little-endian `u32` version (1), `C`, `H`,
//!   `W`, then `C*H*W` little-endian `f32` in channel-major order.
//! * `.mask.pgm`: binary PGM (`P5`), maxval 255, values 0 or 255.
//! * `.dt.f32`: little-endian `u32` `H`, `W`, then `H*W` `f32`.
//! * `.pose.txt`: line 1 holds `R` row-major and `t` (12 numbers), line 2
//!   holds `fx fy cx cy`.
//! * `points.xyz`: one `x y z` per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Real, Tensor};
use crate::render::Mat3;

pub const FEAT_MAGIC: &[u8; 4] = b"CF3D";
pub const FEAT_VERSION: u32 = 1;

/// Pre-adapter backbone features, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// `[C, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&x| T::c(x as f64)).collect();
        Tensor::new(vec![self.channels, self.height, self.width], data).expect("validated dims")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(FEAT_MAGIC);
        for v in [FEAT_VERSION, self.channels as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, String> {
        if b.len() < 20 || &b[..4] != FEAT_MAGIC {
            return Err("not a CF3D feature map".into());
        }
        let u = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if u(0) != FEAT_VERSION as usize {
            return Err(format!("unsupported feature map version {}", u(0)));
        }
        let (c, h, w) = (u(1), u(2), u(3));
        let n = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or("header dims overflow")?;
        if b.len() - 20 != 4 * n {
            return Err(format!("header says {c}x{h}x{w} but payload has {} bytes", b.len() - 20));
        }
        let data: Vec<f32> = b[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err("non-finite feature value".into());
        }
        Ok(FeatureMap {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }
}

/// 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn pgm_bytes(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Binary PPM (`P6`) from interleaved RGB bytes.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height, "rgb buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Parse a binary PGM with maxval below 256.
pub fn parse_pgm(b: &[u8]) -> std::result::Result<Gray, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < b.len() && b[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < b.len() && b[pos] == b'#' {
                while pos < b.len() && b[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < b.len() && !b[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        Ok(String::from_utf8_lossy(&b[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PGM header field '{s}'"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    pos += 1;
    let n = w * h;
    if b.len() < pos + n {
        return Err("truncated PGM payload".into());
    }
    Ok(Gray {
        width: w,
        height: h,
        data: b[pos..pos + n].to_vec(),
    })
}

pub fn dt_bytes(height: usize, width: usize, v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * v.len());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn parse_dt(b: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    if b.len() < 8 {
        return Err("truncated distance transform".into());
    }
    let h = u32::from_le_bytes(b[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
    if b.len() - 8 != 4 * h * w {
        return Err(format!("header says {h}x{w} but payload has {} bytes", b.len() - 8));
    }
    Ok((h, w, b[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
}

/// Camera of one frame as stored on disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRecord {
    pub rotation: Mat3,
    pub translation: [f64; 3],
    /// `fx fy cx cy`.
    pub intrinsics: [f64; 4],
}

impl PoseRecord {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let nums: Vec<String> = self
            .rotation
            .iter()
            .flatten()
            .chain(&self.translation)
            .map(|x| x.to_string())
            .collect();
        writeln!(s, "{}", nums.join(" ")).unwrap();
        let k: Vec<String> = self.intrinsics.iter().map(|x| x.to_string()).collect();
        writeln!(s, "{}", k.join(" ")).unwrap();
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut nums = |want: usize, what: &str| -> std::result::Result<Vec<f64>, String> {
            let line = lines.next().ok_or_else(|| format!("missing {what} line"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| format!("bad number '{t}' in {what}")))
                .collect::<std::result::Result<_, _>>()?;
            if v.len() != want || v.iter().any(|x| !x.is_finite()) {
                return Err(format!("{what} needs {want} finite numbers, got {}", v.len()));
            }
            Ok(v)
        };
        let e = nums(12, "extrinsics")?;
        let k = nums(4, "intrinsics")?;
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = e[3 * i + j];
            }
        }
        Ok(PoseRecord {
            rotation: r,
            translation: [e[9], e[10], e[11]],
            intrinsics: [k[0], k[1], k[2], k[3]],
        })
    }

    /// `max |R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                worst = worst.max((d - f64::from(i == j)).abs());
            }
        }
        worst
    }
}

pub fn xyz_text(points: &[[f64; 3]]) -> String {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}

pub fn parse_xyz(text: &str) -> std::result::Result<Vec<[f64; 3]>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("line {}: bad number", n + 1))?;
            match v.as_slice() {
                [x, y, z] if v.iter().all(|a| a.is_finite()) => Ok([*x, *y, *z]),
                _ => Err(format!("line {}: expected 3 finite numbers", n + 1)),
            }
        })
        .collect()
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, b: &[u8]) -> Result<()> {
    std::fs::write(path, b).map_err(|e| Error::io(path, e))
}
