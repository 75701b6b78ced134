//! Run configuration files (TOML). Every field is optional; values given on
//! the command line take precedence over the file, which takes precedence over
//! built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub shuffle: Option<bool>,
    pub mode: Option<String>,
    pub cache: Option<PathBuf>,
    pub priors: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub level_model: Option<PathBuf>,
    pub level_source: Option<String>,
    pub level_epochs: Option<usize>,
    pub hold_out: Option<Vec<String>>,
    pub trials: Option<usize>,
    pub percentages: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Fields set in `flags` replace those in `self`.
    pub fn overlay(self, flags: RunConfig) -> RunConfig {
        RunConfig {
            seed: flags.seed.or(self.seed),
            lr: flags.lr.or(self.lr),
            batch_size: flags.batch_size.or(self.batch_size),
            epochs: flags.epochs.or(self.epochs),
            shuffle: flags.shuffle.or(self.shuffle),
            mode: flags.mode.or(self.mode),
            cache: flags.cache.or(self.cache),
            priors: flags.priors.or(self.priors),
            model: flags.model.or(self.model),
            out: flags.out.or(self.out),
            level_model: flags.level_model.or(self.level_model),
            level_source: flags.level_source.or(self.level_source),
            level_epochs: flags.level_epochs.or(self.level_epochs),
            hold_out: flags.hold_out.or(self.hold_out),
            trials: flags.trials.or(self.trials),
            percentages: flags.percentages.or(self.percentages),
        }
    }
}
