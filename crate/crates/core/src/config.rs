//! Project-wide configuration file (TOML). Every section is optional and
//! falls back to its defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alarm::AlarmConfig;
use crate::anchors::KMeansConfig;
use crate::dataset::{AugmentationSpec, SplitSpec};
use crate::detect::{DetectorConfig, RetentionConfig};
use crate::eval::EvalConfig;
use crate::temporal::TemporalConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid [{section}] config: {message}")]
    Invalid {
        section: &'static str,
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub temporal: TemporalConfig,
    pub alarm: AlarmConfig,
    pub anchors: KMeansConfig,
    pub augment: AugmentationSpec,
    pub split: SplitSpec,
    pub retention: RetentionConfig,
}

impl GlobalConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Checks every section; the first failure names its section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &'static str| {
            move |message: String| ConfigError::Invalid { section, message }
        };
        self.detector.validate().map_err(invalid("detector"))?;
        self.eval
            .validate()
            .map_err(|e| invalid("eval")(e.to_string()))?;
        self.temporal.validate().map_err(invalid("temporal"))?;
        self.alarm
            .validate()
            .map_err(|e| invalid("alarm")(e.to_string()))?;
        if self.anchors.k == 0 || self.anchors.max_iters == 0 || self.anchors.canvas_px == 0 {
            return Err(invalid("anchors")(
                "k, max_iters and canvas_px must be positive".into(),
            ));
        }
        self.augment
            .validate()
            .map_err(|e| invalid("augment")(e.to_string()))?;
        self.split
            .validate()
            .map_err(|e| invalid("split")(e.to_string()))?;
        if self.retention.window == 0 {
            return Err(invalid("retention")("window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
