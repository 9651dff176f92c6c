//! Run configuration: one TOML document shared by every command.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. `validate` checks each module's preconditions up front.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::deform::HsvChannel;
use crate::detector::{ArchConfig, TrainConfig};
use crate::landmarks::ThresholdParams;
use crate::scene::{DatasetSpec, PoseRange, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config schema version {0} is not supported")]
    SchemaVersion(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

/// One deformation applied to every image of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeformOp {
    Blur {
        sigma: f64,
    },
    Hsv {
        channel: HsvChannel,
        lambda: f64,
    },
    Gamma {
        gamma: f64,
    },
    /// Fit an `m x n` illumination model on the input dataset, then relight it.
    Illumination {
        m: usize,
        n: usize,
    },
    Mirror,
    NoisyLuminary {
        count: usize,
        sigma_px: f64,
        peak: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformConfig {
    pub seed: u64,
    pub op: DeformOp,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            seed: 5,
            op: DeformOp::Blur { sigma: 1.0 },
        }
    }
}

/// Noise sweep for the pose solver on exact synthetic projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub intrinsics: CameraIntrinsics,
    pub poses: PoseRange,
    pub noise_sigmas_px: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::new(2000.0, 2000.0, 959.5, 539.5, 1920, 1080),
            poses: PoseRange {
                min_distance_mm: 3000.0,
                max_distance_mm: 5000.0,
                ..PoseRange::default()
            },
            noise_sigmas_px: vec![0.0, 3.0, 5.0],
            trials: 1000,
            seed: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: crate::eval::IOU_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub landmarks: ThresholdParams,
    pub deform: DeformConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("out"),
            dataset: DatasetSpec::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            landmarks: ThresholdParams::default(),
            deform: DeformConfig::default(),
            bench: BenchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_overrides(Some(path), &[])
    }

    /// Parse `text`, then apply `dotted.key=value` overrides before validation.
    /// Values are read as TOML and fall back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: toml::Table = toml::from_str(text)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {item:?} is not key=value")))?;
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields one part");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| invalid(format!("{key}: {p} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(self.schema_version));
        }
        let d = &self.dataset;
        d.intrinsics.validate().map_err(invalid)?;
        d.render.validate().map_err(invalid)?;
        d.poses.validate().map_err(invalid)?;
        if d.supersample == 0 || d.layout.count < 4 || !(d.layout.radius_mm > 0.0) {
            return Err(invalid(
                "dataset needs supersample >= 1 and a layout of at least 4 lights",
            ));
        }
        if !["png", "pgm", "ppm"].contains(&d.format.as_str()) {
            return Err(invalid(format!("unknown image format {:?}", d.format)));
        }
        self.arch.validate().map_err(invalid)?;
        if d.intrinsics.image_width != self.arch.input_size || d.intrinsics.image_height != self.arch.input_size {
            return Err(invalid(format!(
                "dataset images are {}x{} but the network expects {}",
                d.intrinsics.image_width, d.intrinsics.image_height, self.arch.input_size
            )));
        }
        let t = &self.train;
        let w = &t.weights;
        if t.batch == 0
            || !(t.lr >= 0.0)
            || !(0.0..1.0).contains(&t.momentum)
            || [w.lambda_b, w.lambda_d, w.lambda_dbar].iter().any(|v| !(*v >= 0.0))
        {
            return Err(invalid(format!("bad training settings {t:?}")));
        }
        let l = &self.landmarks;
        if !(l.window_frac > 0.0) || !(l.t_percent >= 0.0) || !(l.presmooth_sigma >= 0.0) {
            return Err(invalid(format!("bad landmark settings {l:?}")));
        }
        let op_ok = match &self.deform.op {
            DeformOp::Blur { sigma } => *sigma > 0.0,
            DeformOp::Hsv { lambda, .. } => *lambda > 0.0 && lambda.is_finite(),
            DeformOp::Gamma { gamma } => *gamma > 0.0 && gamma.is_finite(),
            DeformOp::Illumination { .. } | DeformOp::Mirror => true,
            DeformOp::NoisyLuminary { sigma_px, peak, .. } => *sigma_px > 0.0 && *peak > 0.0 && *peak <= 1.0,
        };
        if !op_ok {
            return Err(invalid(format!("bad deformation {:?}", self.deform.op)));
        }
        let b = &self.bench;
        b.intrinsics.validate().map_err(invalid)?;
        b.poses.validate().map_err(invalid)?;
        if b.trials == 0 || b.noise_sigmas_px.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("bench needs trials > 0 and nonnegative noise levels"));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(invalid("iou_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::DistractorSpec;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn roundtrip_through_toml() {
        let mut cfg = RunConfig::default();
        let d = DistractorSpec::default();
        cfg.deform.op = DeformOp::NoisyLuminary {
            count: d.count,
            sigma_px: d.sigma_px,
            peak: d.peak,
        };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            RunConfig::from_toml("[train]\nlearning_rate = 1.0"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 3\n[deform]\nseed = 9\n[deform.op]\nkind = \"gamma\"\ngamma = 1.5\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch, TrainConfig::default().batch);
        assert_eq!(cfg.deform.op, DeformOp::Gamma { gamma: 1.5 });
    }

    #[test]
    fn dotted_overrides() {
        let over = vec![
            "train.epochs=7".to_string(),
            "dataset.render.blob_peak=0.8".to_string(),
            "output_dir=runs/a".to_string(),
        ];
        let cfg = RunConfig::from_toml_with_overrides("[train]\nepochs = 3\n", &over).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.dataset.render.blob_peak, 0.8);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/a"));
        assert!(RunConfig::from_toml_with_overrides("", &["train.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["epochs".into()]).is_err());
    }

    #[test]
    fn preconditions_checked_at_load() {
        assert!(matches!(
            RunConfig::from_toml("schema_version = 99"),
            Err(ConfigError::SchemaVersion(99))
        ));
        assert!(matches!(
            RunConfig::from_toml("[arch]\ninput_size = 64"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[deform.op]\nkind = \"blur\"\nsigma = 0.0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[eval]\niou_threshold = 2.0"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
