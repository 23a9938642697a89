//! Flat `key = value` configuration shared by every subcommand.
//!
//! Unknown keys are rejected. The `default` preset carries the reference
//! hyper-parameters; `desk` shrinks widths, raises the learning rate and
//! measures the distance-transform term in image widths (64 px) so a
//! synthetic category trains on one CPU core.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::math::AdamConfig;
use crate::morph::StackSpec;
use crate::render::SoftMaskParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub lr: f64,
    pub batch: usize,
    pub grad_accum: usize,
    pub epochs_template: usize,
    pub epochs_joint: usize,
    pub holdout: f64,
    /// Epochs without hold-out improvement before a stage stops.
    pub patience: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub sdf_trainable: bool,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Learning-rate multiplier for the stage that optimizes the template.
    pub template_lr_scale: f64,

    pub lambda_app: f64,
    pub lambda_cd: f64,
    pub lambda_mask: f64,
    pub lambda_mask_dt: f64,
    pub lambda_sdf: f64,
    pub lambda_def: f64,
    pub lambda_def_smooth: f64,
    pub kappa: f64,
    pub vertex_samples: usize,

    pub grid: usize,
    pub sdf_layers: usize,
    pub sdf_hidden: usize,
    pub sdf_out: usize,
    /// Radius of the sphere the SDF is pre-fit to before training.
    pub sdf_init_radius: f64,
    pub eikonal_points: usize,
    pub eikonal_jitter: f64,

    pub encoder_blocks: usize,
    pub encoder_out_dims: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub encoder_upsampling: Vec<usize>,

    pub deform_layers: usize,
    pub deform_hidden: usize,
    pub deform_out: usize,

    pub adapter_blocks: usize,
    pub adapter_out_dims: Vec<usize>,
    pub adapter_strides: Vec<usize>,
    pub adapter_upsampling: Vec<usize>,

    pub feature_layers: usize,
    pub feature_hidden: usize,
    pub feature_dim: usize,

    pub soft_gamma: f64,
    pub soft_top_k: usize,

    pub pose_yaw_steps: usize,
    pub pose_elevations: Vec<f64>,
    pub pose_steps: usize,
    pub pose_lr: f64,
    pub pose_tol: f64,
    /// Weight of backbone similarity when matching keypoints.
    pub corr_backbone_weight: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lr: 1e-4,
            batch: 12,
            grad_accum: 2,
            epochs_template: 20,
            epochs_joint: 20,
            holdout: 0.1,
            patience: 5,
            seed: 0,
            deterministic: true,
            sdf_trainable: false,
            threads: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            template_lr_scale: 1.0,

            lambda_app: 0.1,
            lambda_cd: 0.1,
            lambda_mask: 1.0,
            lambda_mask_dt: 100.0,
            lambda_sdf: 0.01,
            lambda_def: 0.1,
            lambda_def_smooth: 0.01,
            kappa: 14.3,
            vertex_samples: 150,

            grid: 16,
            sdf_layers: 5,
            sdf_hidden: 256,
            sdf_out: 1,
            sdf_init_radius: 0.6,
            eikonal_points: 512,
            eikonal_jitter: 0.05,

            encoder_blocks: 4,
            encoder_out_dims: vec![256, 256, 256, 256],
            encoder_strides: vec![2, 2, 2, 2],
            encoder_upsampling: vec![1, 1, 1],

            deform_layers: 5,
            deform_hidden: 256,
            deform_out: 6,

            adapter_blocks: 4,
            adapter_out_dims: vec![512, 512, 128],
            adapter_strides: vec![1, 1, 1],
            adapter_upsampling: vec![1, 1, 2],

            feature_layers: 5,
            feature_hidden: 256,
            feature_dim: 128,

            soft_gamma: 0.01,
            soft_top_k: 8,

            pose_yaw_steps: 4,
            pose_elevations: vec![-30.0, 0.0, 30.0],
            pose_steps: 30,
            pose_lr: 0.05,
            pose_tol: 1e-5,
            corr_backbone_weight: 0.8,
        }
    }
}

impl Config {
    /// Reduced-width preset for single-core synthetic runs.
    pub fn desk() -> Self {
        Config {
            lr: 1e-3,
            batch: 4,
            grad_accum: 1,
            lambda_mask_dt: 100.0 / 64.0,
            sdf_hidden: 128,
            encoder_out_dims: vec![64, 64, 128, 128],
            deform_hidden: 128,
            adapter_out_dims: vec![128, 128, 128],
            feature_hidden: 128,
            ..Config::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Config::default()),
            "desk" => Some(Config::desk()),
            _ => None,
        }
    }

    /// Parse TOML text, then apply `key=value` overrides (values in TOML
    /// syntax, bare words taken as strings).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = match format!("x = {v}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("x").expect("just inserted"),
                Err(_) => toml::Value::String(v.to_string()),
            };
            table.insert(k.to_string(), value);
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a TOML file, with overrides.
    pub fn load(spec: &str, overrides: &[String]) -> Result<Self> {
        let base = match Config::preset(spec) {
            Some(c) => toml::to_string(&c).expect("config serializes"),
            None => {
                let p = Path::new(spec);
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        Config::from_toml(&base, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return fail("batch and grad_accum must be at least 1".into());
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return fail(format!("holdout must lie in (0, 1), got {}", self.holdout));
        }
        if self.grid < 2 {
            return fail("grid must be at least 2".into());
        }
        if self.vertex_samples == 0 {
            return fail("vertex_samples must be positive".into());
        }
        if self.sdf_out != 1 {
            return fail(format!("sdf_out must be 1, got {}", self.sdf_out));
        }
        if self.deform_out != 6 {
            return fail(format!("deform_out must be 6 (scale and shift), got {}", self.deform_out));
        }
        if self.adapter_out_dims.last() != Some(&self.feature_dim) {
            return fail(format!(
                "adapter_out_dims must end with feature_dim ({}), got {:?}",
                self.feature_dim, self.adapter_out_dims
            ));
        }
        if !(self.sdf_init_radius > 0.0 && self.sdf_init_radius < 1.0) {
            return fail("sdf_init_radius must lie in (0, 1)".into());
        }
        if !(self.eikonal_jitter > 0.0) {
            return fail("eikonal_jitter must be positive".into());
        }
        if !(self.soft_gamma > 0.0) || self.soft_top_k == 0 {
            return fail("soft_gamma and soft_top_k must be positive".into());
        }
        if self.pose_yaw_steps == 0 || self.pose_elevations.is_empty() {
            return fail("pose start grid is empty".into());
        }
        if !(0.0..=1.0).contains(&self.corr_backbone_weight) {
            return fail("corr_backbone_weight must lie in [0, 1]".into());
        }
        if !(self.template_lr_scale >= 0.0) {
            return fail("template_lr_scale must be non-negative".into());
        }
        self.loss_weights().validate()?;
        self.encoder_spec().resolve()?;
        self.adapter_spec().resolve()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            app: self.lambda_app,
            chamfer: self.lambda_cd,
            mask: self.lambda_mask,
            mask_dt: self.lambda_mask_dt,
            sdf: self.lambda_sdf,
            deform: self.lambda_def,
            deform_smooth: self.lambda_def_smooth,
            kappa: self.kappa,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn encoder_spec(&self) -> StackSpec {
        StackSpec {
            blocks: self.encoder_blocks,
            out_dims: self.encoder_out_dims.clone(),
            strides: self.encoder_strides.clone(),
            upsampling: self.encoder_upsampling.clone(),
        }
    }

    pub fn adapter_spec(&self) -> StackSpec {
        StackSpec {
            blocks: self.adapter_blocks,
            out_dims: self.adapter_out_dims.clone(),
            strides: self.adapter_strides.clone(),
            upsampling: self.adapter_upsampling.clone(),
        }
    }

    pub fn soft_mask(&self) -> SoftMaskParams {
        SoftMaskParams {
            gamma: self.soft_gamma,
            top_k: self.soft_top_k,
        }
    }

    pub fn latent_dim(&self) -> usize {
        *self.encoder_out_dims.last().unwrap_or(&0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let c = Config::default();
        assert_eq!((c.lr, c.batch, c.grad_accum), (1e-4, 12, 2));
        assert_eq!(
            (c.lambda_app, c.lambda_cd, c.lambda_mask, c.lambda_mask_dt),
            (0.1, 0.1, 1.0, 100.0)
        );
        assert_eq!((c.lambda_sdf, c.lambda_def, c.lambda_def_smooth, c.kappa), (0.01, 0.1, 0.01, 14.3));
        assert_eq!((c.vertex_samples, c.grid), (150, 16));
        assert_eq!(c.encoder_out_dims, [256; 4]);
        assert_eq!(c.encoder_strides, [2; 4]);
        assert_eq!(c.adapter_out_dims, [512, 512, 128]);
        assert_eq!(c.adapter_upsampling, [1, 1, 2]);
        assert_eq!((c.deform_layers, c.deform_hidden, c.deform_out), (5, 256, 6));
        assert_eq!((c.sdf_layers, c.sdf_hidden, c.sdf_out), (5, 256, 1));
        assert_eq!((c.feature_layers, c.feature_hidden, c.feature_dim), (5, 256, 128));
        assert_eq!((c.epochs_template, c.epochs_joint, c.holdout), (20, 20, 0.1));
        c.validate().unwrap();
        Config::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml(), &[]).unwrap(), c);
        let o = Config::load("default", &["lr=0.5".into(), "adapter_out_dims=[64, 128]".into()]).unwrap();
        assert_eq!(o.lr, 0.5);
        assert_eq!(o.adapter_out_dims, [64, 128]);
        let partial = Config::from_toml("seed = 9\n", &[]).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.kappa, 14.3);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Config::from_toml("learning_rate = 1.0\n", &[]).is_err());
        assert!(Config::from_toml("holdout = 1.0\n", &[]).is_err());
        assert!(Config::from_toml("batch = 0\n", &[]).is_err());
        assert!(Config::from_toml("feature_dim = 64\n", &[]).is_err());
        assert!(Config::load("default", &["nonsense".into()]).is_err());
        assert!(Config::load("/no/such/file.toml", &[]).is_err());
    }
}
