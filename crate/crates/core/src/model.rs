//! The complete category model: template SDF, deformation, feature field,
//! adapter, latent encoder and background descriptor.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::FeatureMap;
use crate::error::{Error, Result};
use crate::math::{AdamConfig, AdamState, Module, ParamFile, Real, Tape, Tensor, Var};
use crate::morph::{Adapter, Background, DeformationField, FeatureField, LatentEncoder};
use crate::render::Intrinsics;
use crate::tetra::{marching_tets_values, Mesh, SdfField, TetGrid};

/// Identifies model files.
pub const MODEL_FORMAT: &str = "morphable-model-1";

/// Parameter groups in storage and optimization order.
pub const GROUPS: [&str; 6] = ["sdf", "deform", "feature", "adapter", "encoder", "background"];

/// Camera used when a query arrives without one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceCamera {
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub config: Config,
    pub raw_channels: usize,
    pub grid: TetGrid,
    pub sdf: SdfField<T>,
    pub deform: DeformationField<T>,
    pub features: FeatureField<T>,
    pub adapter: Adapter<T>,
    pub encoder: LatentEncoder<T>,
    pub background: Background<T>,
    pub camera: Option<ReferenceCamera>,
}

impl<T: Real> Model<T> {
    /// Fresh model for backbone maps with `raw_channels` channels. The SDF is
    /// pre-fit to a sphere of `config.sdf_init_radius`.
    pub fn new(config: &Config, raw_channels: usize) -> Result<Self> {
        let mut m = Self::skeleton(config, raw_channels)?;
        m.prefit_sphere(config.sdf_init_radius, 400)?;
        Ok(m)
    }

    /// Randomly initialized networks, no pre-fit.
    pub fn skeleton(config: &Config, raw_channels: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config;
        let sdf = SdfField::new(c.sdf_layers, c.sdf_hidden, &mut rng)?;
        let deform = DeformationField::new(c.deform_layers, c.deform_hidden, c.latent_dim(), &mut rng)?;
        let features = FeatureField::new(c.feature_layers, c.feature_hidden, c.feature_dim, &mut rng)?;
        let adapter = Adapter::new(raw_channels, &c.adapter_spec(), &mut rng)?;
        let encoder = LatentEncoder::new(raw_channels, &c.encoder_spec(), &mut rng)?;
        let background = Background::new(c.feature_dim, &mut rng);
        Ok(Model {
            config: c.clone(),
            raw_channels,
            grid: TetGrid::new(c.grid)?,
            sdf,
            deform,
            features,
            adapter,
            encoder,
            background,
            camera: None,
        })
    }

    /// Fit the SDF network to `|x| - radius` on the unit cube.
    pub fn prefit_sphere(&mut self, radius: f64, steps: usize) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_5df);
        let mut adam = AdamState::new(AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        });
        let nodes = self.grid.positions().to_vec();
        for step in 0..steps {
            let mut pts: Vec<[f64; 3]> = (0..256)
                .map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            pts.extend((0..256).map(|_| nodes[rng.gen_range(0..nodes.len())]));
            let x: Vec<f64> = pts.iter().flatten().copied().collect();
            let y: Vec<f64> = pts
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius)
                .collect();
            let mut tape = Tape::new();
            let bound = self.sdf.bind(&mut tape);
            let xv = tape.constant(Tensor::from_f64(&[pts.len(), 3], &x)?);
            let pred = self.sdf.evaluate_on(&mut tape, &bound, xv)?;
            let target = tape.constant(Tensor::from_f64(&[pts.len(), 1], &y)?);
            let d = tape.sub(pred, target);
            let d2 = tape.square(d);
            let loss = tape.mean(d2);
            if step + 1 == steps {
                log::debug!("sphere pre-fit loss {:.3e}", tape.value(loss).item().f64());
            }
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = bound.iter().map(|&v| g.take(v)).collect();
            let names: Vec<String> = self.sdf.params().into_iter().map(|(n, _)| n).collect();
            adam.step(names.into_iter().zip(self.sdf.params_mut()).collect(), &grads)?;
        }
        Ok(())
    }

    /// SDF values at every grid node.
    pub fn node_sdf(&self) -> Result<Vec<f64>> {
        let v = self.sdf.evaluate(&self.grid.node_tensor())?;
        if !v.all_finite() {
            return Err(Error::Numeric("SDF produced non-finite values".into()));
        }
        Ok(v.to_f64_vec())
    }

    /// Current template surface.
    pub fn template(&self) -> Result<Mesh<T>> {
        Ok(marching_tets_values(&self.grid, &self.node_sdf()?))
    }

    /// Template mesh with vertex features attached.
    pub fn template_with_features(&self) -> Result<Mesh<T>> {
        let mut m = self.template()?;
        if !m.is_empty() {
            m.features = Some(self.features.eval(&m.vertices)?);
        }
        Ok(m)
    }

    pub fn check_raw(&self, raw: &FeatureMap) -> Result<()> {
        if raw.channels != self.raw_channels {
            return Err(Error::Shape(format!(
                "feature map has {} channels, model expects {}",
                raw.channels, self.raw_channels
            )));
        }
        Ok(())
    }

    pub fn encode(&self, raw: &FeatureMap) -> Result<Tensor<T>> {
        self.check_raw(raw)?;
        self.encoder.eval(&raw.to_tensor())
    }

    /// Adapted unit features `[H'*W', D]` and their grid size.
    pub fn adapt(&self, raw: &FeatureMap) -> Result<(Tensor<T>, (usize, usize))> {
        self.check_raw(raw)?;
        self.adapter.eval(&raw.to_tensor())
    }

    /// Instance vertices for `latent`.
    pub fn deform_vertices(&self, vertices: &Tensor<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.deform.bind_frozen(&mut tape);
        let v = tape.constant(vertices.clone());
        let l = tape.constant(latent.clone());
        let d = self.deform.deform(&mut tape, &b, v, l)?;
        Ok(tape.value(d).clone())
    }

    /// Unit background descriptor.
    pub fn background_unit(&self) -> Tensor<T> {
        let mut tape = Tape::new();
        let b = self.background.bind_frozen(&mut tape);
        let u = self.background.unit(&mut tape, &b);
        tape.value(u).clone()
    }

    fn group(&self, g: &str) -> Vec<(String, &Tensor<T>)> {
        match g {
            "sdf" => self.sdf.params(),
            "deform" => self.deform.params(),
            "feature" => self.features.params(),
            "adapter" => self.adapter.params(),
            "encoder" => self.encoder.params(),
            "background" => self.background.params(),
            _ => Vec::new(),
        }
    }

    /// Every parameter with its qualified name (`group.name`).
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        GROUPS
            .iter()
            .flat_map(|g| self.group(g).into_iter().map(move |(n, t)| (format!("{g}.{n}"), t)))
            .collect()
    }

    /// Mutable parameters of the listed groups with qualified names.
    pub fn named_params_mut(&mut self, groups: &[&str]) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<Vec<String>> = groups
            .iter()
            .map(|g| self.group(g).into_iter().map(|(n, _)| format!("{g}.{n}")).collect())
            .collect();
        let mut sdf = Some(&mut self.sdf);
        let mut deform = Some(&mut self.deform);
        let mut features = Some(&mut self.features);
        let mut adapter = Some(&mut self.adapter);
        let mut encoder = Some(&mut self.encoder);
        let mut background = Some(&mut self.background);
        let mut out = Vec::new();
        for (g, ns) in groups.iter().zip(names) {
            let ts = match *g {
                "sdf" => sdf.take().map(|m| m.params_mut()),
                "deform" => deform.take().map(|m| m.params_mut()),
                "feature" => features.take().map(|m| m.params_mut()),
                "adapter" => adapter.take().map(|m| m.params_mut()),
                "encoder" => encoder.take().map(|m| m.params_mut()),
                "background" => background.take().map(|m| m.params_mut()),
                _ => None,
            };
            out.extend(ns.into_iter().zip(ts.unwrap_or_default()));
        }
        out
    }

    pub fn to_param_file(&self) -> ParamFile {
        let mut f = ParamFile::new();
        f.push_text("format", MODEL_FORMAT);
        f.push_text("config", self.config.to_toml());
        f.push_u64("raw_channels", &[self.raw_channels as u64]);
        f.push_text("activation.sdf", self.sdf.mlp.activation().tag());
        f.push_text("activation.deform", self.deform.mlp.activation().tag());
        f.push_text("activation.feature", self.features.mlp.activation().tag());
        if let Some(c) = self.camera {
            let k = c.intrinsics;
            f.push_tensor(
                "camera.pinhole",
                &Tensor::<f64>::vector(vec![
                    c.translation[0],
                    c.translation[1],
                    c.translation[2],
                    k.fx,
                    k.fy,
                    k.cx,
                    k.cy,
                    k.width as f64,
                    k.height as f64,
                ]),
            );
        }
        for (n, t) in self.named_params() {
            f.push_tensor(n, t);
        }
        f
    }

    pub fn from_param_file(f: &ParamFile) -> Result<Self> {
        if f.text("format")? != MODEL_FORMAT {
            return Err(Error::Invalid(format!("not a model file (format '{}')", f.text("format")?)));
        }
        let config = Config::from_toml(f.text("config")?, &[])?;
        let raw = *f.u64s("raw_channels")?.first().ok_or_else(|| Error::Invalid("empty raw_channels".into()))?;
        let mut m = Self::skeleton(&config, raw as usize)?;
        for g in ["sdf", "deform", "feature"] {
            let tag = f.text(&format!("activation.{g}"))?;
            if tag != "softplus" {
                return Err(Error::Invalid(format!("unsupported {g} activation '{tag}'")));
            }
        }
        if f.get("camera.pinhole").is_some() {
            let c = f.tensor::<f64>("camera.pinhole")?;
            let c = c.data();
            if c.len() != 9 {
                return Err(Error::Invalid("camera.pinhole needs 9 values".into()));
            }
            m.camera = Some(ReferenceCamera {
                translation: [c[0], c[1], c[2]],
                intrinsics: Intrinsics {
                    fx: c[3],
                    fy: c[4],
                    cx: c[5],
                    cy: c[6],
                    width: c[7] as usize,
                    height: c[8] as usize,
                },
            });
        }
        m.load_params(f, "")?;
        Ok(m)
    }

    /// Overwrite every parameter from `prefix + qualified name` fields.
    pub fn load_params(&mut self, f: &ParamFile, prefix: &str) -> Result<()> {
        for (name, t) in self.named_params_mut(&GROUPS) {
            let v = f.tensor::<T>(&format!("{prefix}{name}"))?;
            if v.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: file has {:?}, model has {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            *t = v;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_param_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = ParamFile::read(path)?;
        Self::from_param_file(&f).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Bind a module's parameters as trainable or frozen.
pub fn bind_group<T: Real, M: Module<T>>(m: &M, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
    if trainable {
        m.bind(tape)
    } else {
        m.bind_frozen(tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        Config {
            grid: 8,
            sdf_hidden: 32,
            deform_hidden: 16,
            feature_hidden: 16,
            feature_dim: 8,
            encoder_out_dims: vec![8, 8, 8, 8],
            adapter_out_dims: vec![8, 8, 8],
            vertex_samples: 10,
            ..Config::default()
        }
    }

    #[test]
    fn prefit_gives_a_closed_sphere() {
        let cfg = Config {
            grid: 12,
            ..tiny_config()
        };
        let m = Model::<f32>::new(&cfg, 4).unwrap();
        let mesh = m.template().unwrap();
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        for i in 0..mesh.vertex_count() {
            let p = mesh.vertex(i);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.6).abs() < 0.08, "vertex radius {r}");
        }
    }

    #[test]
    fn file_round_trip() {
        let mut m = Model::<f32>::skeleton(&tiny_config(), 4).unwrap();
        m.camera = Some(ReferenceCamera {
            translation: [0.0, 0.1, 4.0],
            intrinsics: Intrinsics {
                fx: 96.0,
                fy: 96.0,
                cx: 32.0,
                cy: 32.0,
                width: 64,
                height: 64,
            },
        });
        let back = Model::<f32>::from_param_file(&ParamFile::from_bytes(&m.to_param_file().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut other = m.clone();
        other.config.seed = 99;
        assert_ne!(Model::<f32>::skeleton(&other.config, 4).unwrap().sdf, m.sdf);
    }

    #[test]
    fn groups_partition_parameters() {
        let mut m = Model::<f64>::skeleton(&tiny_config(), 4).unwrap();
        let total = m.named_params().len();
        let counts: usize = GROUPS.iter().map(|g| m.named_params_mut(&[g]).len()).sum();
        assert_eq!(counts, total);
        let names: Vec<String> = m.named_params_mut(&["deform", "background"]).into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("deform.") || n == "background.beta"));
        assert_eq!(names.last().unwrap(), "background.beta");
    }
}
