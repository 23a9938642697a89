//! Training objectives, vertex sampling and the surface-probability model.

use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{CustomOp, Real, Tape, Tensor, Var};
use crate::render::SurfaceProb;
use crate::tetra::SdfField;

/// Loss weights and the similarity temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub app: f64,
    pub chamfer: f64,
    pub mask: f64,
    pub mask_dt: f64,
    pub sdf: f64,
    pub deform: f64,
    pub deform_smooth: f64,
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            app: 0.1,
            chamfer: 0.1,
            mask: 1.0,
            mask_dt: 100.0,
            sdf: 0.01,
            deform: 0.1,
            deform_smooth: 0.01,
            kappa: 14.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.app,
            self.chamfer,
            self.mask,
            self.mask_dt,
            self.sdf,
            self.deform,
            self.deform_smooth,
            self.kappa,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn check_len<T: Real>(tape: &Tape<T>, v: Var, t: &Tensor<T>, what: &str) -> Result<()> {
    if tape.value(v).len() != t.len() {
        return Err(Error::Shape(format!(
            "{what}: rendered {} pixels, target {}",
            tape.value(v).len(),
            t.len()
        )));
    }
    Ok(())
}

/// Mean squared difference between soft and target silhouettes.
pub fn loss_mask<T: Real>(tape: &mut Tape<T>, soft: Var, mask: &Tensor<T>) -> Result<Var> {
    check_len(tape, soft, mask, "mask loss")?;
    let m = tape.constant(mask.clone().reshape(tape.shape(soft))?);
    let d = tape.sub(soft, m);
    let d2 = tape.square(d);
    Ok(tape.mean(d2))
}

/// Negative mean overlap with the mask's distance transform.
pub fn loss_mask_dt<T: Real>(tape: &mut Tape<T>, soft: Var, dt: &Tensor<T>) -> Result<Var> {
    check_len(tape, soft, dt, "distance-transform loss")?;
    if dt.data().iter().any(|&x| !(x >= T::zero())) {
        return Err(Error::Validation("distance transform has negative or non-finite values".into()));
    }
    let m = tape.constant(dt.clone().reshape(tape.shape(soft))?);
    let p = tape.mul(soft, m);
    let s = tape.mean(p);
    Ok(tape.neg(s))
}

fn dist3<T: Real>(a: &[T], b: &[T]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Index and distance of the nearest row of `b` for every row of `a`;
/// ties resolve to the lowest index.
fn nearest<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<(usize, T)> {
    (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let p = a.row(i);
            let mut best = (0, T::infinity());
            for j in 0..b.rows() {
                let d = dist3(p, b.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

struct ChamferOp {
    ab: Vec<(usize, f64)>,
    ba: Vec<(usize, f64)>,
}

impl<T: Real> CustomOp<T> for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.item().f64() / (a.rows() + b.rows()) as f64;
        let mut ga = vec![0.0f64; a.len()];
        let mut gb = vec![0.0f64; b.len()];
        let pull = |i: usize, j: usize, d: f64, gi: &mut [f64], gj: &mut [f64], pi: &[T], pj: &[T]| {
            if d <= 0.0 {
                return;
            }
            for k in 0..3 {
                let u = (pi[k] - pj[k]).f64() / d * g;
                gi[3 * i + k] += u;
                gj[3 * j + k] -= u;
            }
        };
        for (i, &(j, d)) in self.ab.iter().enumerate() {
            pull(i, j, d, &mut ga, &mut gb, a.row(i), b.row(j));
        }
        for (j, &(i, d)) in self.ba.iter().enumerate() {
            pull(j, i, d, &mut gb, &mut ga, b.row(j), a.row(i));
        }
        let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape.to_vec(), v.into_iter().map(T::c).collect()).expect("shape");
        vec![Some(t(a.shape(), ga)), Some(t(b.shape(), gb))]
    }
}

/// Symmetric nearest-neighbour distance between two `[N, 3]` sets,
/// normalized by the total point count.
pub fn loss_chamfer<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (tape.value(a), tape.value(b));
    for v in [va, vb] {
        if v.ndim() != 2 || v.cols() != 3 {
            return Err(Error::Shape(format!("chamfer expects [N, 3] sets, got {:?}", v.shape())));
        }
        if v.rows() == 0 {
            return Err(Error::Invalid("chamfer distance of an empty set".into()));
        }
    }
    let ab = nearest(va, vb);
    let ba = nearest(vb, va);
    let mut s = T::zero();
    for &(_, d) in ab.iter().chain(&ba) {
        s += d;
    }
    let out = Tensor::scalar(s / T::c((va.rows() + vb.rows()) as f64));
    let op = ChamferOp {
        ab: ab.into_iter().map(|(j, d)| (j, d.f64())).collect(),
        ba: ba.into_iter().map(|(j, d)| (j, d.f64())).collect(),
    };
    Ok(tape.custom(&[a, b], out, Box::new(op)))
}

/// Plain chamfer value between two point sets.
pub fn chamfer_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let l = loss_chamfer(&mut t, va, vb)?;
    Ok(t.value(l).item().f64())
}

/// Mean of `(|grad sdf(x)| - 1)^2` over `[N, 3]` points.
pub fn loss_eikonal<T: Real>(tape: &mut Tape<T>, sdf: &SdfField<T>, bound: &[Var], points: &Tensor<T>) -> Result<Var> {
    let x = tape.constant(points.clone());
    let (_, g) = sdf.mlp.forward_with_input_grad(tape, bound, x)?;
    let n = tape.norm_rows(g);
    let d = tape.add_scalar(n, -T::one());
    let d2 = tape.square(d);
    Ok(tape.mean(d2))
}

/// Eikonal sample points: half uniform in the cube, half jittered vertices.
pub fn eikonal_points<R: Rng>(rng: &mut R, vertices: &[[f64; 3]], n: usize, jitter: f64) -> Vec<[f64; 3]> {
    let normal = Normal::new(0.0, jitter).expect("positive jitter");
    let near = if vertices.is_empty() { 0 } else { n / 2 };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n - near {
        out.push([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
    }
    for _ in 0..near {
        let v = vertices[rng.gen_range(0..vertices.len())];
        out.push([
            v[0] + normal.sample(rng),
            v[1] + normal.sample(rng),
            v[2] + normal.sample(rng),
        ]);
    }
    out
}

/// Mean squared displacement between template and deformed vertices.
pub fn loss_deform<T: Real>(tape: &mut Tape<T>, v: Var, vdef: Var) -> Result<Var> {
    if tape.shape(v) != tape.shape(vdef) {
        return Err(Error::Shape(format!(
            "deformation loss: {:?} vs {:?}",
            tape.shape(v),
            tape.shape(vdef)
        )));
    }
    let n = tape.shape(v)[0].max(1);
    let d = tape.sub(v, vdef);
    let d2 = tape.square(d);
    let s = tape.sum(d2);
    Ok(tape.scale(s, T::c(1.0 / n as f64)))
}

/// Edges shorter than this are skipped by the smoothness term.
pub const MIN_EDGE: f64 = 1e-9;

/// Mean over edges of the offset difference relative to the edge length.
pub fn loss_deform_smooth<T: Real>(tape: &mut Tape<T>, v: Var, vdef: Var, edges: &[[u32; 2]]) -> Result<Var> {
    if tape.shape(v) != tape.shape(vdef) {
        return Err(Error::Shape("smoothness loss: vertex count mismatch".into()));
    }
    let vv = tape.value(v);
    let kept: Vec<[u32; 2]> = edges
        .iter()
        .copied()
        .filter(|e| dist3(vv.row(e[0] as usize), vv.row(e[1] as usize)).f64() > MIN_EDGE)
        .collect();
    if kept.len() < edges.len() {
        warn!("skipping {} degenerate edges", edges.len() - kept.len());
    }
    if kept.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let ia = Arc::new(kept.iter().map(|e| e[0] as usize).collect::<Vec<_>>());
    let ib = Arc::new(kept.iter().map(|e| e[1] as usize).collect::<Vec<_>>());
    let off = tape.sub(v, vdef);
    let (oa, ob) = (tape.gather_rows(off, ia.clone()), tape.gather_rows(off, ib.clone()));
    let od = tape.sub(oa, ob);
    let num = tape.norm_rows(od);
    let (va, vb) = (tape.gather_rows(v, ia), tape.gather_rows(v, ib));
    let e = tape.sub(va, vb);
    let den = tape.norm_rows(e);
    let r = tape.div(num, den);
    Ok(tape.mean(r))
}

fn is_unit(v: &[f64]) -> bool {
    (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6
}

/// Softmax over `kappa <s, f_j>` for every `f_j` plus the background slot last.
pub fn appearance_prob(s: &[f64], feats: &[Vec<f64>], beta: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if !is_unit(s) || !is_unit(beta) || feats.iter().any(|f| !is_unit(f)) {
        return Err(Error::Contract("appearance probabilities need unit-norm features".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let logits: Vec<f64> = feats.iter().map(|f| kappa * dot(s, f)).chain([kappa * dot(s, beta)]).collect();
    Ok(softmax(&logits))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn sq3(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Softmax of `-|v - v_j|^2 / (2 sigma^2)` over the sampled vertices.
pub fn surface_prob(v: [f64; 3], sampled: &[[f64; 3]], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if sampled.is_empty() {
        return Err(Error::Invalid("no sampled vertices".into()));
    }
    let logits: Vec<f64> = sampled.iter().map(|&s| -sq3(v, s) / (2.0 * sigma * sigma)).collect();
    Ok(softmax(&logits))
}

/// Root mean squared distance from every vertex to its nearest sampled
/// vertex, a vertex never counting as its own neighbour.
pub fn compute_sigma(vertices: &[[f64; 3]], sampled: &[[f64; 3]]) -> Result<f64> {
    if vertices.is_empty() || sampled.is_empty() {
        return Err(Error::Invalid("sigma needs vertices and samples".into()));
    }
    let total: f64 = vertices
        .iter()
        .map(|&v| {
            sampled
                .iter()
                .filter(|&&s| s != v)
                .map(|&s| sq3(v, s))
                .fold(f64::INFINITY, f64::min)
        })
        .map(|d| if d.is_finite() { d } else { 0.0 })
        .sum();
    Ok((total / vertices.len() as f64).sqrt())
}

/// Greedy max-min subset starting from vertex 0; ties go to the lowest id.
pub fn farthest_point_sample(vertices: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    if k > vertices.len() {
        return Err(Error::Invalid(format!("cannot sample {k} of {} vertices", vertices.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut ids = vec![0usize];
    let mut dmin: Vec<f64> = vertices.iter().map(|&v| sq3(v, vertices[0])).collect();
    while ids.len() < k {
        let next = (0..vertices.len()).fold(0, |b, i| if dmin[i] > dmin[b] { i } else { b });
        ids.push(next);
        for (i, d) in dmin.iter_mut().enumerate() {
            *d = d.min(sq3(vertices[i], vertices[next]));
        }
    }
    Ok(ids)
}

/// Surface probability rows for every vertex over the sampled set.
pub fn surface_table(vertices: &[[f64; 3]], sample_ids: Vec<usize>) -> Result<SurfaceProb> {
    let sampled: Vec<[f64; 3]> = sample_ids.iter().map(|&i| vertices[i]).collect();
    let sigma = compute_sigma(vertices, &sampled)?;
    let k = sampled.len();
    let mut data = Vec::with_capacity(vertices.len() * k);
    for &v in vertices {
        data.extend(surface_prob(v, &sampled, sigma)?);
    }
    Ok(SurfaceProb {
        sample_ids,
        table: Tensor::new(vec![vertices.len(), k], data)?,
    })
}

/// Pixel-averaged cross-entropy between the model's appearance distribution
/// and the rendered surface probabilities.
///
/// `s` is `[P, D]`, `phat` `[P, K+1]`, `feats` `[K, D]`, `beta` `[1, D]`.
pub fn loss_appearance<T: Real>(
    tape: &mut Tape<T>,
    s: Var,
    phat: &Tensor<T>,
    feats: Var,
    beta: Var,
    kappa: f64,
) -> Result<Var> {
    let (p, k) = (tape.shape(s)[0], tape.shape(feats)[0]);
    if phat.shape() != [p, k + 1] {
        return Err(Error::Shape(format!(
            "appearance loss: target {:?} for {p} pixels and {k} vertices",
            phat.shape()
        )));
    }
    let w = tape.concat_rows(&[feats, beta]);
    let logits = tape.matmul_bt(s, w);
    let logits = tape.scale(logits, T::c(kappa));
    let logp = tape.log_softmax(logits);
    let target = tape.constant(phat.clone());
    let ce = tape.mul(logp, target);
    let s = tape.sum(ce);
    Ok(tape.scale(s, T::c(-1.0 / p.max(1) as f64)))
}

/// Training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Template,
    Joint,
}

/// Individual loss terms of one sample.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub chamfer: Option<Var>,
    pub mask: Option<Var>,
    pub mask_dt: Option<Var>,
    pub sdf: Option<Var>,
    pub app: Option<Var>,
    pub deform: Option<Var>,
    pub deform_smooth: Option<Var>,
}

/// Weighted objective for `stage`; terms not used by the stage are ignored.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, stage: Stage, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let mut terms = vec![
        ("chamfer", parts.chamfer, w.chamfer),
        ("mask", parts.mask, w.mask),
        ("mask_dt", parts.mask_dt, w.mask_dt),
        ("sdf", parts.sdf, w.sdf),
    ];
    if stage == Stage::Joint {
        terms.extend([
            ("app", parts.app, w.app),
            ("deform", parts.deform, w.deform),
            ("deform_smooth", parts.deform_smooth, w.deform_smooth),
        ]);
    }
    let mut acc: Option<Var> = None;
    for (name, v, weight) in terms {
        let v = v.ok_or_else(|| Error::Contract(format!("{stage:?} objective is missing the {name} term")))?;
        let t = tape.scale(v, T::c(weight));
        acc = Some(match acc {
            Some(a) => tape.add(a, t),
            None => t,
        });
    }
    Ok(acc.expect("at least one term"))
}
