//! Run configuration read from a TOML file.
//!
//! ```toml
//! seed = 7
//! jobs = 4
//!
//! [weights]
//! lambda_cite = 0.3
//! lambda_faith = 0.5
//! lambda_pars = 0.2
//!
//! [scorer]
//! kind = "remote"
//! endpoint = "http://127.0.0.1:8080"
//! batch_size = 32
//!
//! [simulation]
//! group_size = 8
//! steps = 200
//!
//! [verification]
//! min_steps = 3
//! max_steps = 4
//! ```
//!
//! Every key is optional. Command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::SimConfig;
use crate::rewards::RewardWeights;
use crate::scoring::ScorerConfig;
use crate::traces::StepBounds;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    /// Substitute 0.0 faithfulness when the scorer fails instead of aborting.
    pub allow_zero_faith: bool,
    pub weights: RewardWeights,
    pub scorer: ScorerConfig,
    pub simulation: SimConfig,
    pub verification: StepBounds,
}

impl Config {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scorer.validate().map_err(ConfigError::Invalid)?;
        self.simulation
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.verification.min_steps > self.verification.max_steps {
            return Err(ConfigError::Invalid(format!(
                "verification.min_steps ({}) exceeds max_steps ({})",
                self.verification.min_steps, self.verification.max_steps
            )));
        }
        if self.jobs == Some(0) {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Single-line JSON rendering used in report headers.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Parses `"a,b,c"` into cite/faith/pars weights.
pub fn parse_weights(spec: &str) -> Result<RewardWeights, ConfigError> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [c, f, p] = parts.as_slice() else {
        return Err(ConfigError::Invalid(format!(
            "--weights expects three comma-separated numbers (cite,faith,pars), got `{spec}`"
        )));
    };
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| ConfigError::Invalid(format!("bad weight `{s}`")))
    };
    RewardWeights::new(num(c)?, num(f)?, num(p)?).map_err(|e| ConfigError::Invalid(e.to_string()))
}
