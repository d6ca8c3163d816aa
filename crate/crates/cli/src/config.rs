//! Experiment configuration files.
//!
//! Configs are TOML documents mirroring [`ExperimentConfig`]; every key is
//! optional and unknown keys are rejected.

use std::fs;
use std::path::Path;

use sthfl_core::federation::ExperimentConfig;
use sthfl_core::{Error, Result};

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config { field, reason } => Error::Config {
            field,
            reason: format!("{reason} in {}", path.display()),
        },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        let message = e.message().trim().to_string();
        match line {
            Some(line) => Error::config("config", format!("{message} (line {line})")),
            None => Error::config("config", message),
        }
    })?;
    config.validate().map_err(|e| match e {
        Error::Config { field, reason } => match find_key_line(text, &field) {
            Some(line) => Error::Config {
                field,
                reason: format!("{reason} (line {line})"),
            },
            None => Error::Config { field, reason },
        },
        other => other,
    })?;
    Ok(config)
}

/// Canonical TOML rendering; `parse_config_str(&print_config(c)) == c`.
pub fn print_config(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("experiment configs always serialize")
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

// validation reports bare field names; nested sections are not distinguished
fn find_key_line(text: &str, field: &str) -> Option<usize> {
    let key = field.rsplit('.').next().unwrap_or(field);
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

pub(crate) fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}
