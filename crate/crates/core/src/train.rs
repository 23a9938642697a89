//! Two-stage optimization. The template stage fits the SDF alone to masks,
//! distance transforms and point clouds; the joint stage freezes it and fits
//! deformation, feature field, adapter, encoder and background.
//!
//! Every micro-batch builds one shared tape (template extraction, sampled
//! vertex features, background, Eikonal term) and one tape per sample. The
//! per-sample tapes take the shared results as leaves; their gradients are
//! summed in sample order and pushed back through the shared tape.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::data::{Dataset, TrainingSample};
use crate::error::{Error, Result};
pub use crate::losses::Stage;
use crate::losses::{
    eikonal_points, farthest_point_sample, loss_appearance, loss_chamfer, loss_deform, loss_deform_smooth,
    loss_eikonal, loss_mask, loss_mask_dt, surface_table, total_loss, LossParts,
};
use crate::math::{AdamState, Module, ParamFile, Real, Tape, Tensor, Var};
use crate::model::{Model, ReferenceCamera};
use crate::render::{render_mesh, SurfaceProb};
use crate::tetra::{marching_tets, Mesh};

/// Mean loss terms over a set of samples. Terms a stage does not use are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub chamfer: f64,
    pub mask: f64,
    pub mask_dt: f64,
    pub sdf: f64,
    pub app: f64,
    pub deform: f64,
    pub deform_smooth: f64,
}

impl LossBreakdown {
    fn fields(&mut self) -> [&mut f64; 8] {
        [
            &mut self.total,
            &mut self.chamfer,
            &mut self.mask,
            &mut self.mask_dt,
            &mut self.sdf,
            &mut self.app,
            &mut self.deform,
            &mut self.deform_smooth,
        ]
    }

    fn accumulate(&mut self, mut other: LossBreakdown, w: f64) {
        for (a, b) in self.fields().into_iter().zip(other.fields()) {
            *a += w * *b;
        }
    }

    fn weighted_total(&mut self, stage: Stage, cfg: &Config) {
        let w = cfg.loss_weights();
        let mut t = w.chamfer * self.chamfer + w.mask * self.mask + w.mask_dt * self.mask_dt + w.sdf * self.sdf;
        if stage == Stage::Joint {
            t += w.app * self.app + w.deform * self.deform + w.deform_smooth * self.deform_smooth;
        }
        self.total = t;
    }
}

/// One line per event in a JSON-lines file.
pub struct EventLog {
    out: Option<BufWriter<File>>,
}

impl EventLog {
    pub fn disabled() -> Self {
        EventLog { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn event(&mut self, mut value: serde_json::Value) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        value["timestamp"] = json!(ts);
        if let Some(out) = &mut self.out {
            let ok = writeln!(out, "{value}").and_then(|_| out.flush());
            if let Err(e) = ok {
                log::warn!("event log write failed: {e}");
            }
        }
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Template => "template",
        Stage::Joint => "joint",
    }
}

fn stage_index(s: Stage) -> u64 {
    match s {
        Stage::Template => 1,
        Stage::Joint => 2,
    }
}

/// RNG for one epoch of one stage.
pub fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((stage_index(stage) << 32) | epoch as u64);
    r
}

/// Template surface with the per-stage derived quantities.
#[derive(Clone)]
struct Template<T: Real> {
    mesh: Mesh<T>,
    faces: Arc<Vec<[u32; 3]>>,
    surface: Option<SurfaceProb>,
}

impl<T: Real> Template<T> {
    fn new(mesh: Mesh<T>, samples: Option<usize>) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::Numeric("template SDF has no zero crossing; the mesh is empty".into()));
        }
        let surface = match samples {
            Some(k) => {
                let verts: Vec<[f64; 3]> = (0..mesh.vertex_count()).map(|i| mesh.vertex(i)).collect();
                let ids = farthest_point_sample(&verts, k.min(verts.len()))?;
                Some(surface_table(&verts, ids)?)
            }
            None => None,
        };
        Ok(Template {
            faces: Arc::new(mesh.faces.clone()),
            mesh,
            surface,
        })
    }

    fn sample_positions(&self) -> Tensor<T> {
        let ids = &self.surface.as_ref().expect("joint stage template").sample_ids;
        let mut d = Vec::with_capacity(3 * ids.len());
        for &i in ids {
            d.extend_from_slice(self.mesh.vertices.row(i));
        }
        Tensor::new(vec![ids.len(), 3], d).expect("shape")
    }
}

/// Results of the shared tape for one micro-batch.
struct Shared<T: Real> {
    tape: Tape<T>,
    template: Template<T>,
    vertices: Var,
    sdf_vars: Vec<Var>,
    feat_vars: Vec<Var>,
    bg_vars: Vec<Var>,
    sampled_feats: Option<Var>,
    beta: Option<Var>,
    eikonal: Option<Var>,
    eikonal_value: f64,
}

/// Per-sample gradients flowing back to the shared tape and to modules that
/// only live on per-sample tapes.
struct SampleGrads<T: Real> {
    vertices: Option<Tensor<T>>,
    sampled_feats: Option<Tensor<T>>,
    beta: Option<Tensor<T>>,
    params: Vec<(String, Tensor<T>)>,
}

struct SampleOut<T: Real> {
    parts: LossBreakdown,
    grads: Option<SampleGrads<T>>,
}

#[derive(Default)]
struct GradBuffer<T: Real> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> GradBuffer<T> {
    fn add(&mut self, name: String, g: &Tensor<T>, w: f64) {
        let g = g.scale(T::c(w));
        match self.map.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(name, g);
            }
        }
    }
}

fn named_vars<T: Real, M: Module<T>>(prefix: &str, m: &M, vars: &[Var]) -> Vec<(String, Var)> {
    m.params().into_iter().zip(vars).map(|((n, _), &v)| (format!("{prefix}.{n}"), v)).collect()
}

/// Per-sample loss inputs that do not change between samples.
struct SampleContext<'a, T: Real> {
    model: &'a Model<T>,
    cfg: &'a Config,
    stage: Stage,
    template: &'a Template<T>,
    sampled_feats: Option<&'a Tensor<T>>,
    beta: Option<&'a Tensor<T>>,
    vertices_trainable: bool,
}

fn sample_pass<T: Real>(
    ctx: &SampleContext<'_, T>,
    s: &TrainingSample,
    cloud: &Tensor<T>,
    want_grad: bool,
) -> Result<SampleOut<T>> {
    let m = ctx.model;
    let mut tape = Tape::new();
    let tpl = ctx.template;
    let v = if want_grad && ctx.vertices_trainable {
        tape.param(tpl.mesh.vertices.clone())
    } else {
        tape.constant(tpl.mesh.vertices.clone())
    };
    let rot = tape.constant(Tensor::from_f64(&[3, 3], &s.rotation.concat())?);
    let target = tape.constant(cloud.clone());
    let mask_t: Tensor<T> = Tensor::new(vec![s.mask.len()], s.mask.iter().map(|&x| T::c(x as f64 / 255.0)).collect())?;
    let dt_t: Tensor<T> = Tensor::new(vec![s.dt.len()], s.dt.iter().map(|&x| T::c(x as f64)).collect())?;
    let mut parts = LossParts::default();
    let zero = tape.constant(Tensor::scalar(T::zero()));
    parts.sdf = Some(zero);
    let mut per_vars: Vec<(String, Var)> = Vec::new();
    let mut feat_leaf = None;
    let mut beta_leaf = None;

    let surface_v = match ctx.stage {
        Stage::Template => v,
        Stage::Joint => {
            let bind = |tape: &mut Tape<T>, md: &dyn Fn(&mut Tape<T>) -> Vec<Var>| md(tape);
            let dvars = bind(&mut tape, &|t| if want_grad { m.deform.bind(t) } else { m.deform.bind_frozen(t) });
            let avars = bind(&mut tape, &|t| if want_grad { m.adapter.bind(t) } else { m.adapter.bind_frozen(t) });
            let evars = bind(&mut tape, &|t| if want_grad { m.encoder.bind(t) } else { m.encoder.bind_frozen(t) });
            per_vars.extend(named_vars("deform", &m.deform, &dvars));
            per_vars.extend(named_vars("adapter", &m.adapter, &avars));
            per_vars.extend(named_vars("encoder", &m.encoder, &evars));
            let raw = tape.constant(s.features.to_tensor());
            let latent = m.encoder.encode(&mut tape, &evars, raw)?;
            let vd = m.deform.deform(&mut tape, &dvars, v, latent)?;
            let (adapted, (h, w)) = m.adapter.adapt(&mut tape, &avars, raw)?;
            if (w, h) != (s.width(), s.height()) {
                return Err(Error::Shape(format!(
                    "adapter output is {w}x{h} but the mask is {}x{}",
                    s.width(),
                    s.height()
                )));
            }
            let fs = ctx.sampled_feats.expect("joint stage features");
            let b = ctx.beta.expect("joint stage background");
            let fl = if want_grad { tape.param(fs.clone()) } else { tape.constant(fs.clone()) };
            let bl = if want_grad { tape.param(b.clone()) } else { tape.constant(b.clone()) };
            feat_leaf = Some(fl);
            beta_leaf = Some(bl);
            let r = render_mesh(&mut tape, vd, &tpl.faces, rot, s.translation, &s.intrinsics, ctx.cfg.soft_mask())?;
            let phat = tpl.surface.as_ref().expect("joint stage table").render::<T>(&r.raster, &tpl.faces)?;
            parts.app = Some(loss_appearance(&mut tape, adapted, &phat, fl, bl, ctx.cfg.kappa)?);
            parts.deform = Some(loss_deform(&mut tape, v, vd)?);
            parts.deform_smooth = Some(loss_deform_smooth(&mut tape, v, vd, &tpl.mesh.edges)?);
            parts.mask = Some(loss_mask(&mut tape, r.soft_mask, &mask_t)?);
            parts.mask_dt = Some(loss_mask_dt(&mut tape, r.soft_mask, &dt_t)?);
            vd
        }
    };
    if ctx.stage == Stage::Template {
        let r = render_mesh(&mut tape, v, &tpl.faces, rot, s.translation, &s.intrinsics, ctx.cfg.soft_mask())?;
        parts.mask = Some(loss_mask(&mut tape, r.soft_mask, &mask_t)?);
        parts.mask_dt = Some(loss_mask_dt(&mut tape, r.soft_mask, &dt_t)?);
    }
    parts.chamfer = Some(loss_chamfer(&mut tape, surface_v, target)?);
    let total = total_loss(&mut tape, ctx.stage, &parts, &ctx.cfg.loss_weights())?;
    let val = |o: Option<Var>| o.map(|x| tape.value(x).item().f64()).unwrap_or(0.0);
    let out_parts = LossBreakdown {
        total: tape.value(total).item().f64(),
        chamfer: val(parts.chamfer),
        mask: val(parts.mask),
        mask_dt: val(parts.mask_dt),
        sdf: 0.0,
        app: val(parts.app),
        deform: val(parts.deform),
        deform_smooth: val(parts.deform_smooth),
    };
    if !out_parts.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss on {}/frame_{:05}",
            s.video_id, s.frame_id
        )));
    }
    if !want_grad {
        return Ok(SampleOut {
            parts: out_parts,
            grads: None,
        });
    }
    let mut g = tape.backward(total)?;
    let grads = SampleGrads {
        vertices: ctx.vertices_trainable.then(|| g.take(v)),
        sampled_feats: feat_leaf.map(|f| g.take(f)),
        beta: beta_leaf.map(|b| g.take(b)),
        params: per_vars.into_iter().map(|(n, var)| (n, g.take(var))).collect(),
    };
    Ok(SampleOut {
        parts: out_parts,
        grads: Some(grads),
    })
}

/// Optimizer state and data for one stage.
pub struct StageRunner<'a, T: Real> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    cfg: Config,
    data: &'a Dataset,
    train_videos: Vec<usize>,
    holdout_videos: Vec<usize>,
    clouds: Vec<Tensor<T>>,
    frozen: Option<(Template<T>, f64)>,
}

impl<'a, T: Real> StageRunner<'a, T> {
    pub fn new(model: Model<T>, data: &'a Dataset, stage: Stage) -> Result<Self> {
        let cfg = model.config.clone();
        if data.sample_count() == 0 {
            return Err(Error::Validation("training needs at least one sample".into()));
        }
        if stage == Stage::Joint {
            for (_, s) in data.samples() {
                if s.features.channels != model.raw_channels || s.features.data.is_empty() {
                    return Err(Error::Validation(format!(
                        "{}/frame_{:05}: feature map with {} channels, model expects {}",
                        s.video_id, s.frame_id, s.features.channels, model.raw_channels
                    )));
                }
            }
        }
        let (train_videos, holdout_videos) = data.split(cfg.holdout);
        let clouds = data
            .videos
            .iter()
            .map(|v| {
                let d: Vec<f64> = v.points.iter().flatten().copied().collect();
                Tensor::from_f64(&[v.points.len(), 3], &d)
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = match stage {
            Stage::Template => cfg.lr * cfg.template_lr_scale,
            Stage::Joint => cfg.lr,
        };
        let mut r = StageRunner {
            adam: AdamState::new(cfg.adam(lr)),
            model,
            stage,
            epoch: 0,
            cfg,
            data,
            train_videos,
            holdout_videos,
            clouds,
            frozen: None,
        };
        r.refresh_frozen()?;
        Ok(r)
    }

    fn sdf_trainable(&self) -> bool {
        self.stage == Stage::Template || self.cfg.sdf_trainable
    }

    pub fn trainable_groups(&self) -> Vec<&'static str> {
        match self.stage {
            Stage::Template => vec!["sdf"],
            Stage::Joint => {
                let mut g = vec![];
                if self.cfg.sdf_trainable {
                    g.push("sdf");
                }
                g.extend(["deform", "feature", "adapter", "encoder", "background"]);
                g
            }
        }
    }

    fn refresh_frozen(&mut self) -> Result<()> {
        if self.sdf_trainable() {
            self.frozen = None;
            return Ok(());
        }
        let tpl = Template::new(self.model.template()?, Some(self.cfg.vertex_samples))?;
        let mut rng = epoch_rng(self.cfg.seed, self.stage, usize::MAX >> 32);
        let eik = self.eikonal_value(&tpl, &mut rng)?;
        self.frozen = Some((tpl, eik));
        Ok(())
    }

    fn eikonal_value(&self, tpl: &Template<T>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let pts = self.eikonal_sample(tpl, rng)?;
        let mut tape = Tape::new();
        let b = self.model.sdf.bind_frozen(&mut tape);
        let e = loss_eikonal(&mut tape, &self.model.sdf, &b, &pts)?;
        Ok(tape.value(e).item().f64())
    }

    fn eikonal_sample(&self, tpl: &Template<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let verts: Vec<[f64; 3]> = (0..tpl.mesh.vertex_count()).map(|i| tpl.mesh.vertex(i)).collect();
        let pts = eikonal_points(rng, &verts, self.cfg.eikonal_points, self.cfg.eikonal_jitter);
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        Tensor::from_f64(&[pts.len(), 3], &flat)
    }

    /// Shared tape for one micro-batch.
    fn shared(&self, rng: &mut ChaCha8Rng, want_grad: bool) -> Result<Shared<T>> {
        let m = &self.model;
        let mut tape = Tape::new();
        let train_sdf = want_grad && self.sdf_trainable();
        let (template, vertices, sdf_vars, eikonal, eikonal_value) = match &self.frozen {
            Some((tpl, eik)) => {
                let v = tape.constant(tpl.mesh.vertices.clone());
                (tpl.clone(), v, Vec::new(), None, *eik)
            }
            None => {
                let sdf_vars = if train_sdf { m.sdf.bind(&mut tape) } else { m.sdf.bind_frozen(&mut tape) };
                let ext = marching_tets(&mut tape, &m.grid, &m.sdf, &sdf_vars)?;
                let samples = (self.stage == Stage::Joint).then_some(self.cfg.vertex_samples);
                let tpl = Template::new(ext.mesh, samples)?;
                let pts = self.eikonal_sample(&tpl, rng)?;
                let e = loss_eikonal(&mut tape, &m.sdf, &sdf_vars, &pts)?;
                let ev = tape.value(e).item().f64();
                (tpl, ext.vertices, sdf_vars, Some(e), ev)
            }
        };
        let (mut feat_vars, mut bg_vars, mut sampled_feats, mut beta) = (Vec::new(), Vec::new(), None, None);
        if self.stage == Stage::Joint {
            feat_vars = if want_grad { m.features.bind(&mut tape) } else { m.features.bind_frozen(&mut tape) };
            bg_vars = if want_grad { m.background.bind(&mut tape) } else { m.background.bind_frozen(&mut tape) };
            let pos = template.sample_positions();
            let pv = tape.constant(pos);
            sampled_feats = Some(m.features.vertex_features(&mut tape, &feat_vars, pv)?);
            beta = Some(m.background.unit(&mut tape, &bg_vars));
        }
        Ok(Shared {
            tape,
            template,
            vertices,
            sdf_vars,
            feat_vars,
            bg_vars,
            sampled_feats,
            beta,
            eikonal,
            eikonal_value,
        })
    }

    fn context<'s>(&'s self, sh: &'s Shared<T>, f: &'s Option<Tensor<T>>, b: &'s Option<Tensor<T>>, grad: bool) -> SampleContext<'s, T> {
        SampleContext {
            model: &self.model,
            cfg: &self.cfg,
            stage: self.stage,
            template: &sh.template,
            sampled_feats: f.as_ref(),
            beta: b.as_ref(),
            vertices_trainable: grad && self.sdf_trainable(),
        }
    }

    fn sample(&self, (v, i): (usize, usize)) -> &TrainingSample {
        &self.data.videos[v].samples[i]
    }

    /// Forward and backward over `samples`, split into micro-batches.
    /// Returns mean losses and per-parameter gradients of the mean loss.
    fn gradients(&self, samples: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<(LossBreakdown, GradBuffer<T>)> {
        let n = samples.len() as f64;
        let mut buf = GradBuffer::default();
        let mut mean = LossBreakdown::default();
        for micro in samples.chunks(self.cfg.batch) {
            let sh = self.shared(rng, true)?;
            let f = sh.sampled_feats.map(|v| sh.tape.value(v).clone());
            let b = sh.beta.map(|v| sh.tape.value(v).clone());
            let ctx = self.context(&sh, &f, &b, true);
            let (mut gv, mut gf, mut gb): (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) = (None, None, None);
            for &id in micro {
                let out = sample_pass(&ctx, self.sample(id), &self.clouds[id.0], true)?;
                let mut p = out.parts;
                p.sdf = sh.eikonal_value;
                mean.accumulate(p, 1.0 / n);
                let g = out.grads.expect("requested");
                let add = |acc: &mut Option<Tensor<T>>, x: Option<Tensor<T>>| {
                    if let Some(x) = x {
                        let x = x.scale(T::c(1.0 / n));
                        match acc {
                            Some(a) => a.add_assign(&x),
                            None => *acc = Some(x),
                        }
                    }
                };
                add(&mut gv, g.vertices);
                add(&mut gf, g.sampled_feats);
                add(&mut gb, g.beta);
                for (name, t) in g.params {
                    buf.add(name, &t, 1.0 / n);
                }
            }
            let mut seeds = Vec::new();
            if let Some(g) = gv {
                seeds.push((sh.vertices, g));
            }
            if let (Some(g), Some(v)) = (gf, sh.sampled_feats) {
                seeds.push((v, g));
            }
            if let (Some(g), Some(v)) = (gb, sh.beta) {
                seeds.push((v, g));
            }
            if let Some(e) = sh.eikonal {
                let w = self.cfg.lambda_sdf * micro.len() as f64 / n;
                seeds.push((e, Tensor::scalar(T::c(w))));
            }
            if seeds.is_empty() {
                continue;
            }
            let mut g = sh.tape.backward_seeded(seeds);
            let m = &self.model;
            let shared_named = named_vars("sdf", &m.sdf, &sh.sdf_vars)
                .into_iter()
                .chain(named_vars("feature", &m.features, &sh.feat_vars))
                .chain(named_vars("background", &m.background, &sh.bg_vars));
            for (name, var) in shared_named {
                buf.add(name, &g.take(var), 1.0);
            }
        }
        mean.weighted_total(self.stage, &self.cfg);
        Ok((mean, buf))
    }

    /// One optimizer step on `samples`.
    pub fn step(&mut self, samples: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let (loss, buf) = self.gradients(samples, rng)?;
        let groups = self.trainable_groups();
        let params = self.model.named_params_mut(&groups);
        let grads: Vec<Tensor<T>> = params
            .iter()
            .map(|(n, t)| buf.map.get(n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.adam.step(params, &grads)?;
        if self.sdf_trainable() && self.frozen.is_none() && self.stage == Stage::Joint {
            self.refresh_frozen()?;
        }
        Ok(loss)
    }

    fn train_samples(&self) -> Vec<(usize, usize)> {
        self.train_videos
            .iter()
            .flat_map(|&v| (0..self.data.videos[v].samples.len()).map(move |i| (v, i)))
            .collect()
    }

    pub fn holdout_samples(&self) -> Vec<(usize, usize)> {
        self.holdout_videos
            .iter()
            .flat_map(|&v| (0..self.data.videos[v].samples.len()).map(move |i| (v, i)))
            .collect()
    }

    /// One pass over the training videos in a seeded order.
    pub fn run_epoch(&mut self, log: &mut EventLog) -> Result<LossBreakdown> {
        let mut rng = epoch_rng(self.cfg.seed, self.stage, self.epoch);
        let mut order = self.train_samples();
        order.shuffle(&mut rng);
        let per_step = self.cfg.batch * self.cfg.grad_accum;
        let mut mean = LossBreakdown::default();
        let n = order.len() as f64;
        for (k, chunk) in order.chunks(per_step).enumerate() {
            let l = self.step(chunk, &mut rng)?;
            mean.accumulate(l, chunk.len() as f64 / n);
            log.event(json!({
                "stage": stage_name(self.stage),
                "epoch": self.epoch,
                "step": k,
                "split": "train",
                "loss": l,
            }));
        }
        self.epoch += 1;
        Ok(mean)
    }

    /// Stage objective on the given samples without updating anything.
    pub fn evaluate(&self, samples: &[(usize, usize)]) -> Result<LossBreakdown> {
        let mut rng = epoch_rng(self.cfg.seed, self.stage, (usize::MAX >> 32) - 1);
        let sh = self.shared(&mut rng, false)?;
        let f = sh.sampled_feats.map(|v| sh.tape.value(v).clone());
        let b = sh.beta.map(|v| sh.tape.value(v).clone());
        let ctx = self.context(&sh, &f, &b, false);
        let mut mean = LossBreakdown::default();
        let n = samples.len().max(1) as f64;
        for &id in samples {
            let mut p = sample_pass(&ctx, self.sample(id), &self.clouds[id.0], false)?.parts;
            p.sdf = sh.eikonal_value;
            mean.accumulate(p, 1.0 / n);
        }
        mean.weighted_total(self.stage, &self.cfg);
        Ok(mean)
    }

    pub fn holdout_loss(&self) -> Result<LossBreakdown> {
        let s = self.holdout_samples();
        if s.is_empty() {
            return self.evaluate(&self.train_samples());
        }
        self.evaluate(&s)
    }

    /// Model, optimizer and schedule position.
    pub fn checkpoint(&self) -> ParamFile {
        let mut f = self.model.to_param_file();
        f.push_text("ckpt.stage", stage_name(self.stage));
        f.push_u64("ckpt.epoch", &[self.epoch as u64]);
        f.push_u64("ckpt.seed", &[self.cfg.seed]);
        f.push_u64("adam.step", &[self.adam.step_count()]);
        let c = self.adam.config;
        f.push_tensor("adam.config", &Tensor::<f64>::vector(vec![c.lr, c.beta1, c.beta2, c.eps]));
        for (name, m, v) in self.adam.moments() {
            f.push_tensor(format!("adam.m.{name}"), m);
            f.push_tensor(format!("adam.v.{name}"), v);
        }
        f
    }

    pub fn from_checkpoint(f: &ParamFile, data: &'a Dataset) -> Result<Self> {
        let model = Model::<T>::from_param_file(f)?;
        let stage = match f.text("ckpt.stage")? {
            "template" => Stage::Template,
            "joint" => Stage::Joint,
            s => return Err(Error::Invalid(format!("unknown stage '{s}' in checkpoint"))),
        };
        let epoch = f.u64s("ckpt.epoch")?[0] as usize;
        let mut r = StageRunner::new(model, data, stage)?;
        let c = f.tensor::<f64>("adam.config")?;
        let c = c.data();
        let config = crate::math::AdamConfig {
            lr: c[0],
            beta1: c[1],
            beta2: c[2],
            eps: c[3],
        };
        let names: Vec<String> = r.model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut moments = Vec::new();
        for n in names {
            if f.get(&format!("adam.m.{n}")).is_some() {
                moments.push((n.clone(), f.tensor(&format!("adam.m.{n}"))?, f.tensor(&format!("adam.v.{n}"))?));
            }
        }
        r.adam = AdamState::restore(config, f.u64s("adam.step")?[0], moments);
        r.epoch = epoch;
        Ok(r)
    }
}

/// Outcome of one stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub stage: &'static str,
    pub initial_holdout: LossBreakdown,
    pub best_holdout: LossBreakdown,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<(LossBreakdown, LossBreakdown)>,
}

/// Run up to `epochs` epochs with hold-out early stopping; the runner's
/// model is left at the best hold-out state.
pub fn run_stage<T: Real>(runner: &mut StageRunner<'_, T>, epochs: usize, log: &mut EventLog) -> Result<StageReport> {
    let initial = runner.holdout_loss()?;
    let name = stage_name(runner.stage);
    log.event(json!({"stage": name, "epoch": runner.epoch, "split": "holdout", "loss": initial}));
    log::info!("{name}: initial hold-out loss {:.5}", initial.total);
    let mut best = (initial, runner.model.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    for _ in 0..epochs {
        let tr = runner.run_epoch(log)?;
        let ho = runner.holdout_loss()?;
        log.event(json!({"stage": name, "epoch": runner.epoch, "split": "holdout", "loss": ho}));
        log::info!(
            "{name} epoch {}: train {:.5} hold-out {:.5} (chamfer {:.4}, app {:.4})",
            runner.epoch,
            tr.total,
            ho.total,
            ho.chamfer,
            ho.app
        );
        history.push((tr, ho));
        if ho.total < best.0.total {
            best = (ho, runner.model.clone(), runner.epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= runner.cfg.patience {
                log::info!("{name}: no hold-out improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    runner.model = best.1;
    runner.refresh_frozen()?;
    Ok(StageReport {
        stage: name,
        initial_holdout: initial,
        best_holdout: best.0,
        best_epoch: best.2,
        epochs_run: history.len(),
        history,
    })
}

/// Both stages' reports.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub template: StageReport,
    pub joint: StageReport,
    pub parameters: usize,
}

/// Reference camera from the first training sample.
fn reference_camera(data: &Dataset) -> Option<ReferenceCamera> {
    data.samples().next().map(|(_, s)| ReferenceCamera {
        translation: s.translation,
        intrinsics: s.intrinsics,
    })
}

/// Full schedule. With `out`, writes `config.toml`, `train_log.jsonl`,
/// stage checkpoints, `model.mcm` and `summary.json` there.
pub fn train<T: Real>(cfg: &Config, data: &Dataset, out: Option<&Path>) -> Result<(Model<T>, TrainSummary)> {
    cfg.validate()?;
    let first = data
        .samples()
        .next()
        .ok_or_else(|| Error::Validation("training needs at least one sample".into()))?
        .1;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("config.toml");
            std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
            EventLog::create(&dir.join("train_log.jsonl"))?
        }
        None => EventLog::disabled(),
    };
    let mut model = Model::<T>::new(cfg, first.features.channels)?;
    model.camera = reference_camera(data);
    log::info!("model with {} parameters", model.param_count());

    let mut r1 = StageRunner::new(model, data, Stage::Template)?;
    let template = run_stage(&mut r1, cfg.epochs_template, &mut log)?;
    if let Some(dir) = out {
        r1.checkpoint().write(&dir.join("stage1.ckpt"))?;
    }
    let mut r2 = StageRunner::new(r1.model, data, Stage::Joint)?;
    let joint = run_stage(&mut r2, cfg.epochs_joint, &mut log)?;
    let summary = TrainSummary {
        template,
        joint,
        parameters: r2.model.param_count(),
    };
    if let Some(dir) = out {
        r2.checkpoint().write(&dir.join("stage2.ckpt"))?;
        r2.model.save(&dir.join("model.mcm"))?;
        let p = dir.join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("serializable"))
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok((r2.model, summary))
}
