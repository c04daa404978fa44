//! Run configuration file (TOML).
//!
//! ```toml
//! [data]
//! manifest = "data/synth/manifest.json"
//! target_size = [128, 160]
//!
//! [model]
//! scheme = "A"
//!
//! [train]
//! epochs = 5
//!
//! [loss]
//! label_smoothing = 0.1
//!
//! [output]
//! directory = "runs/desk"
//! ```
//!
//! Every key except `data.manifest` and `output.directory` has a default.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, ThermalNormalization};
use crate::error::{io_err, Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

fn default_preprocess() -> PreprocessConfig {
    PreprocessConfig::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    #[serde(default = "default_target_size")]
    pub target_size: [usize; 2],
    #[serde(default = "default_rgb_mean")]
    pub rgb_mean: [f64; 3],
    #[serde(default = "default_rgb_std")]
    pub rgb_std: [f64; 3],
    #[serde(default = "default_thermal")]
    pub thermal_normalization: ThermalNormalization,
    #[serde(default = "default_hflip")]
    pub hflip_prob: f64,
}

fn default_target_size() -> [usize; 2] {
    default_preprocess().target_size
}

fn default_rgb_mean() -> [f64; 3] {
    default_preprocess().rgb_mean
}

fn default_rgb_std() -> [f64; 3] {
    default_preprocess().rgb_std
}

fn default_thermal() -> ThermalNormalization {
    default_preprocess().thermal_normalization
}

fn default_hflip() -> f64 {
    default_preprocess().hflip_prob
}

impl DataSection {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self::from_preprocess(manifest, &PreprocessConfig::default())
    }

    pub fn from_preprocess(manifest: impl Into<PathBuf>, p: &PreprocessConfig) -> Self {
        Self {
            manifest: manifest.into(),
            target_size: p.target_size,
            rgb_mean: p.rgb_mean,
            rgb_std: p.rgb_std,
            thermal_normalization: p.thermal_normalization,
            hflip_prob: p.hflip_prob,
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_size: self.target_size,
            rgb_mean: self.rgb_mean,
            rgb_std: self.rgb_std,
            thermal_normalization: self.thermal_normalization,
            hflip_prob: self.hflip_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            data: DataSection::new(manifest),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            output: OutputSection {
                directory: output.into(),
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.manifest, &mut cfg.output.directory] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.model.pretrained_path.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.manifest.as_os_str().is_empty() {
            return Err(Error::Config("data.manifest must not be empty".into()));
        }
        if self.output.directory.as_os_str().is_empty() {
            return Err(Error::Config("output.directory must not be empty".into()));
        }
        self.data.preprocess().validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
