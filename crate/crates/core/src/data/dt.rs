//! Exact Euclidean distance transform of a binary mask.

/// 1D squared distance transform of `f` (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let Some(_) = first else {
            first = Some(q);
            v[0] = q;
            continue;
        };
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Distance in pixels from every foreground pixel to the nearest
/// background pixel center; zero on background. Pixels outside the image
/// count as background.
pub fn distance_transform(mask: &[bool], height: usize, width: usize) -> Vec<f32> {
    assert_eq!(mask.len(), height * width);
    let (h, w) = (height + 2, width + 2);
    let mut g = vec![0.0f64; h * w];
    for i in 0..height {
        for j in 0..width {
            if mask[i * width + j] {
                g[(i + 1) * w + j + 1] = f64::INFINITY;
            }
        }
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = g[i * w + j];
        }
        edt_1d(&col, &mut tmp);
        for i in 0..h {
            g[i * w + j] = tmp[i];
        }
    }
    let mut row = vec![0.0; w];
    for i in 0..h {
        edt_1d(&g[i * w..(i + 1) * w], &mut row);
        g[i * w..(i + 1) * w].copy_from_slice(&row);
    }
    let mut out = vec![0.0f32; height * width];
    for i in 0..height {
        for j in 0..width {
            out[i * width + j] = g[(i + 1) * w + j + 1].sqrt() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(mask: &[bool], h: usize, w: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; h * w];
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                if !mask[(i * w as i64 + j) as usize] {
                    continue;
                }
                let mut best = f64::INFINITY;
                for a in -1..=h as i64 {
                    for b in -1..=w as i64 {
                        let bg = a < 0 || b < 0 || a >= h as i64 || b >= w as i64 || !mask[(a * w as i64 + b) as usize];
                        if bg {
                            best = best.min((((a - i) * (a - i) + (b - j) * (b - j)) as f64).sqrt());
                        }
                    }
                }
                out[(i * w as i64 + j) as usize] = best as f32;
            }
        }
        out
    }

    #[test]
    fn matches_brute_force() {
        let (h, w) = (13, 17);
        let mask: Vec<bool> = (0..h * w)
            .map(|k| {
                let (i, j) = ((k / w) as f64, (k % w) as f64);
                (i - 6.0).powi(2) / 30.0 + (j - 8.0).powi(2) / 50.0 < 1.0 || (i as usize == 2 && j as usize > 10)
            })
            .collect();
        assert_eq!(distance_transform(&mask, h, w), brute(&mask, h, w));
        let full = vec![true; 20];
        assert_eq!(distance_transform(&full, 4, 5), brute(&full, 4, 5));
        assert!(distance_transform(&[false; 6], 2, 3).iter().all(|&x| x == 0.0));
    }
}
