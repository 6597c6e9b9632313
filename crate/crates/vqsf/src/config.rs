//! Run configuration: a flat, strictly validated key-value document.
//!
//! Unknown keys are rejected, every value is range-checked at load, and
//! the fully resolved document is echoed into the run directory so a run
//! is reproducible from its own artifacts. Defaults are desk-scale (train
//! in minutes on a CPU); `configs/full_scale.toml` carries the large
//! preset accepted by the same schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::ShapeKind;
use crate::shapeformer::ShapeFormerConfig;
use crate::vqdif::VqdifConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub seed: u64,
    /// "f32" for training speed or "f64" for checking-grade numerics.
    pub precision: String,
    pub output_dir: String,

    // Dataset generation.
    pub data_kinds: Vec<String>,
    pub data_train: usize,
    pub data_val: usize,
    pub data_test: usize,
    /// Scans per train/val shape.
    pub data_train_views: usize,
    /// Scans per test shape.
    pub data_test_views: usize,
    pub data_cloud_points: usize,
    pub data_scan_points: usize,
    /// Occupancy-target pool size per shape.
    pub data_targets: usize,
    pub data_sigma_near: f64,
    pub data_sigma_far: f64,
    pub data_uniform_frac: f64,
    /// Optional isotropic Gaussian jitter applied to scan points.
    pub data_scan_noise: f64,

    // Sequence geometry shared by both models.
    pub resolution: usize,
    pub codebook_size: usize,

    // Autoencoder.
    pub vqdif_base_resolution: usize,
    pub vqdif_point_feature_dim: usize,
    pub vqdif_feature_dim: usize,
    pub vqdif_encoder_channels: Vec<usize>,
    pub vqdif_unet_channels: Vec<usize>,
    pub vqdif_upsampler_channels: Vec<usize>,
    pub vqdif_upsampler_kernels: Vec<usize>,
    pub vqdif_implicit_hidden: Vec<usize>,
    pub vqdif_beta: f64,
    pub vqdif_ema_decay: f64,
    pub vqdif_ema_epsilon: f64,
    pub vqdif_dead_code_steps: u32,
    pub vqdif_lr: f64,
    pub vqdif_lr_decay: f64,
    pub vqdif_lr_decay_every: usize,
    pub vqdif_steps: usize,
    pub vqdif_batch_size: usize,
    pub vqdif_targets_per_step: usize,

    // Completion transformer.
    pub shapeformer_blocks_coord: usize,
    pub shapeformer_blocks_value: usize,
    pub shapeformer_heads: usize,
    pub shapeformer_embed_dim: usize,
    pub shapeformer_max_seq_len: usize,
    pub shapeformer_dropout: f64,
    pub shapeformer_mask_prob: f64,
    pub shapeformer_lr: f64,
    pub shapeformer_steps: usize,
    pub shapeformer_batch_size: usize,

    // Sampling and evaluation.
    pub top_p: f64,
    pub num_samples: usize,
    /// Cap on generated tuples per completion.
    pub max_tuples: usize,
    pub reconstruct_resolution: usize,
    /// Points per cloud when resampling meshes for metrics.
    pub eval_points: usize,
    /// Test views that get completion samples during `eval` (ambiguity is
    /// still ranked over every view).
    pub eval_views: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 42,
            precision: "f32".into(),
            output_dir: "runs/desk".into(),
            data_kinds: vec![
                "sphere".into(),
                "box".into(),
                "torus".into(),
                "cylinder".into(),
                "table".into(),
                "cup".into(),
            ],
            data_train: 200,
            data_val: 20,
            data_test: 20,
            data_train_views: 4,
            data_test_views: 70,
            data_cloud_points: 2048,
            data_scan_points: 1024,
            data_targets: 8192,
            data_sigma_near: 0.01,
            data_sigma_far: 0.05,
            data_uniform_frac: 0.2,
            data_scan_noise: 0.0,
            resolution: 8,
            codebook_size: 256,
            vqdif_base_resolution: 32,
            vqdif_point_feature_dim: 32,
            vqdif_feature_dim: 32,
            vqdif_encoder_channels: vec![32, 32],
            vqdif_unet_channels: vec![32, 64, 128],
            vqdif_upsampler_channels: vec![24, 16],
            vqdif_upsampler_kernels: vec![3, 1],
            vqdif_implicit_hidden: vec![64, 64, 64],
            vqdif_beta: 0.01,
            vqdif_ema_decay: 0.99,
            vqdif_ema_epsilon: 1e-5,
            vqdif_dead_code_steps: 200,
            vqdif_lr: 1e-3,
            vqdif_lr_decay: 0.9,
            vqdif_lr_decay_every: 1000,
            vqdif_steps: 5000,
            vqdif_batch_size: 1,
            vqdif_targets_per_step: 2048,
            shapeformer_blocks_coord: 4,
            shapeformer_blocks_value: 2,
            shapeformer_heads: 4,
            shapeformer_embed_dim: 128,
            shapeformer_max_seq_len: 160,
            shapeformer_dropout: 0.0,
            shapeformer_mask_prob: 0.3,
            shapeformer_lr: 3e-4,
            shapeformer_steps: 4000,
            shapeformer_batch_size: 2,
            top_p: 0.4,
            num_samples: 1,
            max_tuples: 150,
            reconstruct_resolution: 64,
            eval_points: 2048,
            eval_views: 4,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return err(format!(
                "schema version {} unsupported (this build reads {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.precision != "f32" && self.precision != "f64" {
            return err(format!("precision `{}` must be f32 or f64", self.precision));
        }
        if self.data_kinds.is_empty() {
            return err("data_kinds must list at least one shape kind".into());
        }
        for k in &self.data_kinds {
            ShapeKind::parse(k)?;
        }
        if self.data_test_views < 6 && self.data_test > 0 {
            return err(format!("data_test_views {} must be >= 6", self.data_test_views));
        }
        if self.data_cloud_points == 0 || self.data_scan_points == 0 || self.data_targets == 0 {
            return err("point budgets must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.data_uniform_frac) {
            return err(format!("data_uniform_frac {} out of [0,1]", self.data_uniform_frac));
        }
        if self.data_sigma_near > self.data_sigma_far {
            return err(format!(
                "data_sigma_near {} must not exceed data_sigma_far {}",
                self.data_sigma_near, self.data_sigma_far
            ));
        }
        if self.data_scan_noise < 0.0 {
            return err("data_scan_noise must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return err(format!("top_p {} out of [0,1]", self.top_p));
        }
        if self.num_samples == 0 || self.max_tuples == 0 {
            return err("num_samples and max_tuples must be positive".into());
        }
        if self.reconstruct_resolution < 2 || self.reconstruct_resolution > 256 {
            return err(format!(
                "reconstruct_resolution {} out of [2, 256]",
                self.reconstruct_resolution
            ));
        }
        if self.eval_views == 0 || self.eval_views > self.data_test_views {
            return err(format!(
                "eval_views {} out of [1, data_test_views={}]",
                self.eval_views, self.data_test_views
            ));
        }
        if self.vqdif_steps == 0 || self.shapeformer_steps == 0 {
            return err("step counts must be positive".into());
        }
        if self.vqdif_batch_size == 0 || self.shapeformer_batch_size == 0 {
            return err("batch sizes must be positive".into());
        }
        if self.vqdif_lr <= 0.0 || self.shapeformer_lr <= 0.0 {
            return err("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.vqdif_lr_decay) || self.vqdif_lr_decay == 0.0 {
            return err(format!("vqdif_lr_decay {} out of (0,1]", self.vqdif_lr_decay));
        }
        if self.vqdif_lr_decay_every == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return err("interval settings must be positive".into());
        }
        // The model configs run their own checks.
        self.vqdif_config()?.validate()?;
        self.shapeformer_config()?.validate()?;
        Ok(())
    }

    pub fn vqdif_config(&self) -> Result<VqdifConfig> {
        Ok(VqdifConfig {
            base_resolution: self.vqdif_base_resolution,
            feature_resolution: self.resolution,
            point_feature_dim: self.vqdif_point_feature_dim,
            feature_dim: self.vqdif_feature_dim,
            codebook_size: self.codebook_size,
            encoder_channels: self.vqdif_encoder_channels.clone(),
            unet_channels: self.vqdif_unet_channels.clone(),
            upsampler_channels: self.vqdif_upsampler_channels.clone(),
            upsampler_kernels: self.vqdif_upsampler_kernels.clone(),
            implicit_hidden: self.vqdif_implicit_hidden.clone(),
            beta: self.vqdif_beta,
            ema_decay: self.vqdif_ema_decay,
            ema_epsilon: self.vqdif_ema_epsilon,
            dead_code_steps: self.vqdif_dead_code_steps,
        })
    }

    pub fn shapeformer_config(&self) -> Result<ShapeFormerConfig> {
        Ok(ShapeFormerConfig {
            resolution: self.resolution,
            vocab: self.codebook_size,
            blocks_coord: self.shapeformer_blocks_coord,
            blocks_value: self.shapeformer_blocks_value,
            heads: self.shapeformer_heads,
            embed_dim: self.shapeformer_embed_dim,
            max_seq_len: self.shapeformer_max_seq_len,
            dropout: self.shapeformer_dropout,
            mask_prob: self.shapeformer_mask_prob,
        })
    }

    pub fn shape_kinds(&self) -> Result<Vec<ShapeKind>> {
        self.data_kinds.iter().map(|k| ShapeKind::parse(k)).collect()
    }

    /// Loads a TOML file, applies `key=value` overrides (overrides win),
    /// rejects unknown keys, and range-validates everything.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse()
                    .map_err(|e| Error::format(p, format!("not valid TOML: {e}")))?
            }
            None => toml::Table::new(),
        };
        for entry in overrides {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{entry}` is not key=value")))?;
            let parsed: toml::Value = match format!("x = {value}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("x").unwrap(),
                // Bare words become strings.
                Err(_) => toml::Value::String(value.to_string()),
            };
            table.insert(key.trim().to_string(), parsed);
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Serializes the fully resolved document.
    pub fn to_toml(&self) -> String {
        let header = format!(
            "# resolved configuration (vqsf {})\n# schema version {}\n",
            env!("CARGO_PKG_VERSION"),
            self.schema_version
        );
        header + &toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\nbanana = 2\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
    }

    #[test]
    fn ranges_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "top_p = 1.5\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
        std::fs::write(&path, "precision = \"f16\"\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
        std::fs::write(&path, "schema_version = 9\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\ntop_p = 0.3\n").unwrap();
        let c = RunConfig::load(Some(&path), &["seed=99".into(), "top_p=0.7".into()]).unwrap();
        assert_eq!(c.seed, 99);
        assert_eq!(c.top_p, 0.7);
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig::default();
        let text = c.to_toml();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, &text).unwrap();
        let back = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn full_scale_values_accepted() {
        // The paper-scale preset must pass the same schema.
        let overrides = [
            "resolution=16",
            "codebook_size=4096",
            "vqdif_base_resolution=64",
            "shapeformer_blocks_coord=20",
            "shapeformer_blocks_value=4",
            "shapeformer_heads=16",
            "shapeformer_embed_dim=1024",
            "shapeformer_max_seq_len=812",
            "vqdif_lr=1e-4",
            "shapeformer_lr=1e-5",
        ]
        .map(String::from);
        let c = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(c.resolution, 16);
        assert_eq!(c.codebook_size, 4096);
        assert_eq!(c.shapeformer_max_seq_len, 812);
    }
}
