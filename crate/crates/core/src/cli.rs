//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::data::formats::{pgm_bytes, ppm_bytes, read_bytes, read_text, write_bytes, Gray};
use crate::data::synth::{gen_synthetic, read_ground_truth, Family, SynthSpec};
use crate::data::{load_dataset, Dataset, FeatureMap, PoseRecord};
use crate::error::{Error, Result};
use crate::infer::{
    default_camera, evaluate, pose_problem, prepare, synthetic_pairs, InferenceContext, PoseOptions,
};
use crate::math::Tensor;
use crate::model::Model;
use crate::render::{Intrinsics, Mat3};

/// Exit status for bad invocations.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for invalid or unreadable data.
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "morphable", version, about = "Feature-field morphable models: training, pose estimation, evaluation")]
pub struct Cli {
    /// Cap on worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic category.
    GenSynth(GenSynthArgs),
    /// Fit a category model.
    Train(TrainArgs),
    /// Estimate the rotation of the object in one feature map.
    InferPose(InferPoseArgs),
    /// Estimate every view of a dataset and report pose, mask and keypoint metrics.
    Eval(EvalArgs),
    /// Write the template (or an instance) as Wavefront OBJ.
    ExportMesh(ExportMeshArgs),
    /// Write silhouette and feature visualizations for one feature map.
    RenderDebug(RenderDebugArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Preset name (default, desk) or path to a config file.
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Override one key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<Config> {
        let mut ov = self.overrides.clone();
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        Config::load(&self.config, &ov)
    }
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long, default_value = "ellipsoid")]
    pub family: Family,
    #[arg(long, default_value_t = 10)]
    pub videos: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the shared ground-truth feature field.
    #[arg(long, default_value_t = 7)]
    pub field_seed: u64,
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 128)]
    pub channels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root holding one directory per category.
    #[arg(long, default_value = ".")]
    pub data: PathBuf,
    /// Category to train; optional when the root holds exactly one.
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferPoseArgs {
    /// Model directory (holding `model.mcm`) or model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Backbone feature map (`.feat`).
    #[arg(long)]
    pub features: PathBuf,
    /// Pose file supplying translation and intrinsics; the model's reference
    /// camera is used otherwise.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Image size `WxH` the camera intrinsics refer to.
    #[arg(long)]
    pub image_size: Option<String>,
    /// Where to write the estimated pose.
    #[arg(long)]
    pub out_pose: Option<PathBuf>,
    /// Override pose settings, e.g. `--set pose_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root, or a category directory.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub category: Option<String>,
    /// Text report; a JSON twin is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Keypoints per frame pair for synthetic categories.
    #[arg(long, default_value_t = 10)]
    pub keypoints: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ExportMeshArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Deform the template with the latent of this feature map.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderDebugArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Pose to render at; estimated when absent.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Category directory name: the given one, or the only one under `root`.
pub fn resolve_category(root: &Path, category: Option<&str>) -> Result<String> {
    if let Some(c) = category {
        return Ok(c.to_string());
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    dirs.sort();
    match dirs.len() {
        1 => Ok(dirs.remove(0)),
        0 => Err(Error::data(root, "no category directories")),
        _ => Err(Error::Invalid(format!(
            "{} holds several categories ({}); pass --category",
            root.display(),
            dirs.join(", ")
        ))),
    }
}

fn load(root: &Path, category: Option<&str>) -> Result<Dataset> {
    let cat = resolve_category(root, category)?;
    load_dataset(root, &cat)
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.mcm")
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path) -> Result<Model<f32>> {
    Model::load(&model_path(p))
}

fn load_features(p: &Path) -> Result<FeatureMap> {
    FeatureMap::from_bytes(&read_bytes(p)?).map_err(|m| Error::data(p, m))
}

fn load_pose(p: &Path) -> Result<PoseRecord> {
    PoseRecord::parse(&read_text(p)?).map_err(|m| Error::data(p, m))
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("image size must look like 64x64, got '{s}'"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

/// Camera from a pose file, else the model's reference camera.
fn resolve_camera(
    model: &Model<f32>,
    pose: Option<&PoseRecord>,
    size: Option<&str>,
) -> Result<([f64; 3], Intrinsics)> {
    let (t, mut k) = default_camera(model).or_else(|e| match pose {
        Some(_) => Ok((
            [0.0; 3],
            Intrinsics {
                fx: 1.0,
                fy: 1.0,
                cx: 0.0,
                cy: 0.0,
                width: 0,
                height: 0,
            },
        )),
        None => Err(e),
    })?;
    let (t, mut k) = match pose {
        Some(p) => {
            let [fx, fy, cx, cy] = p.intrinsics;
            k = Intrinsics { fx, fy, cx, cy, ..k };
            (p.translation, k)
        }
        None => (t, k),
    };
    if let Some(s) = size {
        (k.width, k.height) = parse_size(s)?;
    }
    if k.width == 0 {
        return Err(Error::Invalid("pass --image-size; the model stores no reference camera".into()));
    }
    Ok((t, k))
}

fn with_overrides(model: &Model<f32>, overrides: &[String]) -> Result<Config> {
    if overrides.is_empty() {
        return Ok(model.config.clone());
    }
    Config::from_toml(&model.config.to_toml(), overrides)
}

fn infer_pose(a: &InferPoseArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = with_overrides(&model, &a.overrides)?;
    let raw = load_features(&a.features)?;
    let pose = a.camera.as_deref().map(load_pose).transpose()?;
    let (t, k) = resolve_camera(&model, pose.as_ref(), a.image_size.as_deref())?;
    let hyp = crate::infer::estimate_pose(&model, &raw, Some((t, k)), &PoseOptions::from_config(&cfg))?;
    let rec = PoseRecord {
        rotation: hyp.rotation,
        translation: t,
        intrinsics: [k.fx, k.fy, k.cx, k.cy],
    };
    if let Some(p) = &a.out_pose {
        write_bytes(p, rec.to_text().as_bytes())?;
    }
    println!("{}", serde_json::to_string_pretty(&hyp).expect("serializable"));
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = with_overrides(&model, &a.overrides)?;
    let (root, cat) = if a.dataset.join("synth.json").exists() || a.category.is_none() && has_videos(&a.dataset) {
        let name = a.dataset.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        (a.dataset.parent().map(Path::to_path_buf).unwrap_or_default(), name)
    } else {
        (a.dataset.clone(), resolve_category(&a.dataset, a.category.as_deref())?)
    };
    let data = load_dataset(&root, &cat)?;
    let cat_dir = root.join(&cat);
    let pairs = if cat_dir.join("synth.json").exists() {
        let ids: Vec<String> = data.videos.iter().map(|v| v.id.clone()).collect();
        let (_, shapes) = read_ground_truth(&cat_dir, &ids)?;
        synthetic_pairs(&data, &shapes, a.keypoints)
    } else {
        Vec::new()
    };
    let report = evaluate(&model, &data, &PoseOptions::from_config(&cfg), &pairs)?;
    let table = report.to_table();
    write_bytes(&a.report, table.as_bytes())?;
    let json = a.report.with_extension("json");
    write_bytes(&json, serde_json::to_string_pretty(&report).expect("serializable").as_bytes())?;
    print!("{table}");
    Ok(())
}

fn has_videos(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|it| it.filter_map(|e| e.ok()).any(|e| e.path().join("points.xyz").exists()))
        .unwrap_or(false)
}

fn export_mesh(a: &ExportMeshArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut mesh = model.template()?;
    if mesh.is_empty() {
        return Err(Error::Numeric("the template is empty".into()));
    }
    if let Some(f) = &a.features {
        let raw = load_features(f)?;
        let latent = model.encode(&raw)?;
        mesh = mesh.with_vertices(model.deform_vertices(&mesh.vertices, &latent)?);
    }
    mesh.export_obj(&a.out)?;
    println!("{} vertices, {} faces -> {}", mesh.vertex_count(), mesh.faces.len(), a.out.display());
    Ok(())
}

/// Top three principal directions of unit rows, by power iteration.
fn pca3(rows: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = rows.cols();
    let n = rows.rows().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|j| (0..rows.rows()).map(|i| rows.row(i)[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..rows.rows() {
        let r: Vec<f64> = rows.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b] / n;
            }
        }
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..3.min(d) {
        let mut v: Vec<f64> = (0..d).map(|j| if j % 3 == c { 1.0 } else { 0.5 }).collect();
        for _ in 0..100 {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
            for u in &basis {
                let p: f64 = w.iter().zip(u).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nw < 1e-15 {
                break;
            }
            v = w.into_iter().map(|x| x / nw).collect();
        }
        basis.push(v);
    }
    basis
}

/// RGB bytes of `rows` projected on `basis`, scaled by `range`.
fn colorize(rows: &Tensor<f64>, basis: &[Vec<f64>], keep: &[bool]) -> Vec<u8> {
    let proj: Vec<[f64; 3]> = (0..rows.rows())
        .map(|i| {
            let mut c = [0.0; 3];
            for (k, b) in basis.iter().enumerate() {
                c[k] = rows.row(i).iter().zip(b).map(|(x, y)| x * y).sum();
            }
            c
        })
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (c, &k) in proj.iter().zip(keep) {
        if k {
            for j in 0..3 {
                lo[j] = lo[j].min(c[j]);
                hi[j] = hi[j].max(c[j]);
            }
        }
    }
    let mut out = Vec::with_capacity(3 * proj.len());
    for (c, &k) in proj.iter().zip(keep) {
        for j in 0..3 {
            let v = if k && hi[j] > lo[j] { (c[j] - lo[j]) / (hi[j] - lo[j]) } else { 0.0 };
            out.push((255.0 * v).round() as u8);
        }
    }
    out
}

fn render_debug(a: &RenderDebugArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let raw = load_features(&a.features)?;
    let pose = a.pose.as_deref().map(load_pose).transpose()?;
    let (t, k) = resolve_camera(&model, pose.as_ref(), a.image_size.as_deref())?;
    let ctx = InferenceContext::new(&model)?;
    let img = prepare(&model, &ctx, &raw)?;
    let problem = pose_problem(&ctx, &img, t, &k)?;
    let rotation: Mat3 = match &pose {
        Some(p) => p.rotation,
        None => problem.estimate(&PoseOptions::from_config(&model.config))?.rotation,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (h, w) = img.size;
    let soft = problem.soft_mask(&rotation)?;
    let mask = Gray {
        width: w,
        height: h,
        data: soft.iter().map(|m| (255.0 * m.clamp(0.0, 1.0)).round() as u8).collect(),
    };
    write_bytes(&a.out.join("mask.pgm"), &pgm_bytes(&mask))?;
    let basis = pca3(&img.adapted);
    let all = vec![true; h * w];
    write_bytes(&a.out.join("features.ppm"), &ppm_bytes(w, h, &colorize(&img.adapted, &basis, &all)))?;
    let rendered = problem.rendered_features(&rotation)?;
    let covered: Vec<bool> = (0..h * w).map(|p| rendered.row(p).iter().any(|x| *x != 0.0)).collect();
    write_bytes(&a.out.join("rendered.ppm"), &ppm_bytes(w, h, &colorize(&rendered, &basis, &covered)))?;
    println!("wrote mask.pgm, features.ppm, rendered.ppm to {}", a.out.display());
    Ok(())
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.family, a.videos, a.frames, a.seed);
    spec.field_seed = a.field_seed;
    spec.image_size = a.image_size;
    spec.feature_size = a.image_size / 2;
    spec.focal = 1.5 * a.image_size as f64;
    spec.channels = a.channels;
    if let Some(c) = &a.category {
        spec.category = c.clone();
    }
    let dir = gen_synthetic(&spec, &a.out)?;
    println!("{}", dir.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = load(&a.data, a.category.as_deref())?;
    log::info!(
        "training '{}' on {} videos / {} samples",
        data.category,
        data.videos.len(),
        data.sample_count()
    );
    let (_, summary) = crate::train::train::<f32>(&cfg, &data, Some(&a.out))?;
    println!(
        "template hold-out chamfer {:.5}; joint hold-out appearance {:.5} (from {:.5})",
        summary.template.best_holdout.chamfer, summary.joint.best_holdout.app, summary.joint.initial_holdout.app
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        // a pool may already exist when called from tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::InferPose(a) => infer_pose(a),
        Command::Eval(a) => eval(a),
        Command::ExportMesh(a) => export_mesh(a),
        Command::RenderDebug(a) => render_debug(a),
    }
}

/// Parse `args`, run, and map the outcome to an exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            }
        }
    }
}
