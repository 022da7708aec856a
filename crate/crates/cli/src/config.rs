//! TOML experiment files. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use fedseg::federation::ExperimentConfig;

use crate::error::{CliError, Result};

pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    cfg.validate().map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, path)
}

/// The configuration rendered back to TOML.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("experiment configs serialize to TOML")
}
