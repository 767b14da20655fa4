use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use vlnmp::pipeline::{PipelineConfig, RemoteOptions};

use crate::CliError;

/// Settings read from `--config`. Every key is optional; command-line flags
/// take precedence over these, which take precedence over the defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub beta0: Option<f64>,
    pub beta1: Option<f64>,
    pub beam_width: Option<usize>,
    pub beam_width_cap: Option<usize>,
    pub oracle_bound: Option<u64>,
    pub gamma: Option<f64>,
    pub seed: Option<u64>,
    pub variants: Option<usize>,
    pub extract_endpoint: Option<String>,
    pub detect_endpoint: Option<String>,
    pub caption_endpoint: Option<String>,
    pub timeout_secs: Option<f64>,
    pub retries: Option<u32>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn remote_options(&self) -> RemoteOptions {
        let default = RemoteOptions::default();
        RemoteOptions {
            timeout: self
                .timeout_secs
                .map_or(default.timeout, Duration::from_secs_f64),
            retries: self.retries.unwrap_or(default.retries),
        }
    }
}

/// Alignment and sampling overrides given on the command line.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Weight of the mean detection score [default: 0.5]
    #[arg(long)]
    pub beta0: Option<f64>,
    /// Weight of the mean box score [default: 0.1]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Base beam width [default: 16]
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Upper limit on the effective beam width [default: 200]
    #[arg(long)]
    pub beam_width_cap: Option<usize>,
    /// Largest search space solved exactly [default: 1000000]
    #[arg(long)]
    pub oracle_bound: Option<u64>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn resolve(&self, file: &FileConfig) -> Result<PipelineConfig, CliError> {
        let mut cfg = PipelineConfig::default();
        let a = &mut cfg.alignment;
        a.beta0 = self.beta0.or(file.beta0).unwrap_or(a.beta0);
        a.beta1 = self.beta1.or(file.beta1).unwrap_or(a.beta1);
        a.beam_width = self.beam_width.or(file.beam_width).unwrap_or(a.beam_width);
        a.beam_width_cap = self
            .beam_width_cap
            .or(file.beam_width_cap)
            .unwrap_or(a.beam_width_cap);
        a.oracle_bound = self
            .oracle_bound
            .or(file.oracle_bound)
            .unwrap_or(a.oracle_bound);
        cfg.seed = self.seed.or(file.seed).unwrap_or(cfg.seed);
        cfg.gamma = file.gamma.unwrap_or(cfg.gamma);
        cfg.variants = file.variants.unwrap_or(cfg.variants);
        cfg.validate()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}
