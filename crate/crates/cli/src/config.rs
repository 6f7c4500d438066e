//! The shared pipeline configuration.
//!
//! One TOML file drives every subcommand. Each section has a complete set of
//! defaults, so an empty file apart from `seed` is a valid configuration;
//! `PipelineConfig::default().to_toml()` prints all of them.

use std::fs;
use std::path::{Path, PathBuf};

use lung_detr::dataset::{AugmentRanges, Role};
use lung_detr::model::ModelConfig;
use lung_detr::preprocess::PreprocessParams;
use lung_detr::rng::derive_seed;
use lung_detr::trainer::{LossConfig, OptimConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::SynthParams;

/// Subdirectory of `output_root` holding everything this version writes.
pub const OUTPUT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{what} does not exist: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory of `.mhd`/`.raw` scans.
    pub scans: PathBuf,
    /// Annotations CSV (`seriesuid, coordX, coordY, coordZ, diameter_mm`).
    pub annotations: PathBuf,
    /// Root of all generated artifacts; outputs go to `<output_root>/v1`.
    pub output_root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            scans: PathBuf::from("data/scans"),
            annotations: PathBuf::from("data/annotations.csv"),
            output_root: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlabParams {
    pub thickness_mm: f64,
    pub stride_mm: f64,
    /// Slab images are zero-padded at the bottom and right to a multiple of this.
    pub pad_multiple: usize,
}

impl Default for SlabParams {
    fn default() -> Self {
        SlabParams {
            thickness_mm: 7.5,
            stride_mm: 7.5,
            pad_multiple: lung_detr::model::INPUT_MULTIPLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    /// Slab-count fractions for train, val and test.
    pub ratios: [f64; 3],
    /// Target positive-slab fraction for train, val and test.
    pub positive_rates: [f64; 3],
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            ratios: [0.7, 0.2, 0.1],
            positive_rates: [0.127, 0.127, 0.03],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Role evaluated when `--role` is not given.
    pub role: Role,
    /// Fixed operating threshold. When absent, the F1-maximizing threshold on
    /// the validation role is used.
    pub threshold: Option<f64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            role: Role::Test,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Master seed. Model initialization, shuffling, splitting, augmentation
    /// and the synthetic corpus all derive their streams from it.
    pub seed: u64,
    /// Worker threads for per-scan and per-image work.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthParams,
    #[serde(default)]
    pub preprocess: PreprocessParams,
    #[serde(default)]
    pub slab: SlabParams,
    #[serde(default)]
    pub split: SplitParams,
    #[serde(default)]
    pub augment: AugmentRanges,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalParams,
}

fn default_workers() -> usize {
    1
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: default_workers(),
            paths: Paths::default(),
            synth: SynthParams::default(),
            preprocess: PreprocessParams::default(),
            slab: SlabParams::default(),
            split: SplitParams::default(),
            augment: AugmentRanges::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            eval: EvalParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        if let Some(base) = path.parent() {
            cfg.paths.scans = base.join(&cfg.paths.scans);
            cfg.paths.annotations = base.join(&cfg.paths.annotations);
            cfg.paths.output_root = base.join(&cfg.paths.output_root);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parameter checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return invalid("workers must be at least 1".into());
        }
        if !(self.slab.thickness_mm > 0.0 && self.slab.stride_mm > 0.0) {
            return invalid(format!(
                "slab thickness and stride must be positive, got {} / {}",
                self.slab.thickness_mm, self.slab.stride_mm
            ));
        }
        if self.slab.pad_multiple == 0
            || !self
                .slab
                .pad_multiple
                .is_multiple_of(lung_detr::model::INPUT_MULTIPLE)
        {
            return invalid(format!(
                "pad_multiple must be a positive multiple of {}, got {}",
                lung_detr::model::INPUT_MULTIPLE,
                self.slab.pad_multiple
            ));
        }
        let sum: f64 = self.split.ratios.iter().sum();
        if self.split.ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return invalid(format!(
                "split ratios must be non-negative and sum to 1, got {:?}",
                self.split.ratios
            ));
        }
        if self
            .split
            .positive_rates
            .iter()
            .any(|r| !(*r > 0.0 && *r < 1.0))
        {
            return invalid(format!(
                "positive rates must lie in (0, 1), got {:?}",
                self.split.positive_rates
            ));
        }
        if let Some(t) = self.eval.threshold {
            if !(0.0..=1.0).contains(&t) {
                return invalid(format!("threshold must lie in [0, 1], got {t}"));
            }
        }
        self.synth.validate().map_err(ConfigError::Invalid)?;
        self.synth
            .validate_for_slabs(self.slab.thickness_mm)
            .map_err(ConfigError::Invalid)?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.effective_optim()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss
            .focal
            .validate()
            .and(self.loss.weights.validate())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Check that the scan directory and annotations file exist.
    pub fn validate_inputs(&self) -> Result<(), ConfigError> {
        if !self.paths.scans.is_dir() {
            return Err(ConfigError::MissingPath {
                what: "scan directory",
                path: self.paths.scans.clone(),
            });
        }
        if !self.paths.annotations.is_file() {
            return Err(ConfigError::MissingPath {
                what: "annotations file",
                path: self.paths.annotations.clone(),
            });
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_root.join(OUTPUT_VERSION)
    }

    /// Model configuration with its initialization seed derived from [`Self::seed`].
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            init_seed: derive_seed(self.seed, "model"),
            ..self.model.clone()
        }
    }

    /// Optimizer configuration with its shuffling seed derived from [`Self::seed`].
    pub fn effective_optim(&self) -> OptimConfig {
        OptimConfig {
            seed: derive_seed(self.seed, "optim"),
            ..self.optim.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text, Path::new("inline")).unwrap();
        assert_eq!(back, cfg);
        for section in [
            "[paths]",
            "[synth]",
            "[preprocess]",
            "[slab]",
            "[split]",
            "[augment]",
            "[model]",
            "[optim]",
            "[loss",
            "[eval]",
        ] {
            assert!(text.contains(section), "missing {section}");
        }
    }

    #[test]
    fn seed_alone_is_a_complete_config() {
        let cfg = PipelineConfig::from_toml("seed = 7", Path::new("inline")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.split.positive_rates, [0.127, 0.127, 0.03]);
        assert_eq!(cfg.slab.thickness_mm, 7.5);
    }

    #[test]
    fn missing_seed_is_rejected() {
        assert!(PipelineConfig::from_toml("workers = 2", Path::new("inline")).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "seed = 0\nworkers = 0",
            "seed = 0\n[split]\nratios = [0.5, 0.2, 0.1]",
            "seed = 0\n[split]\npositive_rates = [0.1, 0.1, 0.0]",
            "seed = 0\n[slab]\npad_multiple = 20",
            "seed = 0\n[eval]\nthreshold = 1.5",
        ] {
            assert!(
                matches!(
                    PipelineConfig::from_toml(text, Path::new("inline")),
                    Err(ConfigError::Invalid(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn missing_inputs_are_named() {
        let cfg = PipelineConfig {
            paths: Paths {
                scans: PathBuf::from("/nonexistent/scans"),
                ..Paths::default()
            },
            ..PipelineConfig::default()
        };
        let err = cfg.validate_inputs().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/scans"), "{err}");
    }

    #[test]
    fn derived_seeds_follow_the_master_seed() {
        let a = PipelineConfig {
            seed: 1,
            ..PipelineConfig::default()
        };
        let b = PipelineConfig {
            seed: 2,
            ..PipelineConfig::default()
        };
        assert_ne!(a.effective_model().init_seed, b.effective_model().init_seed);
        assert_ne!(a.effective_optim().seed, b.effective_optim().seed);
        assert_eq!(a.effective_optim().seed, a.clone().effective_optim().seed);
    }
}
