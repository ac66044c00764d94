//! Config file loading. Precedence is flags, then the file, then defaults.
//!
//! ```toml
//! seed = 7
//! threads = 2
//! deterministic = true
//!
//! [align]
//! cc_threshold = 0.95
//!
//! [train]
//! batch_size = 8
//! loss_profile = "mse"
//! [train.loss_weights]
//! tv = 300.0
//!
//! [curve]
//! max_shift = 10
//! crop = 100
//! ```

use std::fs;
use std::path::Path;

use anyhow::Context;
use clap::parser::ValueSource;
use clap::ArgMatches;
use dped::imageio::GaussianKernelSpec;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub deterministic: Option<bool>,
    pub align: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub curve: Option<CurveFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveFile {
    pub max_shift: Option<usize>,
    pub crop: Option<usize>,
    pub kernel: Option<GaussianKernelSpec>,
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = toml::from_str(&text).map_err(|e| dped::Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Writes `value` into `slot` when the flag `id` was given explicitly.
pub fn apply<T: Clone>(m: &ArgMatches, id: &str, value: &T, slot: &mut T) {
    if from_cli(m, id) {
        *slot = value.clone();
    }
}

/// Flag if given, else file value, else the flag's default.
pub fn pick<T: Clone>(m: &ArgMatches, id: &str, flag: &T, file: Option<T>) -> T {
    if from_cli(m, id) {
        flag.clone()
    } else {
        file.unwrap_or_else(|| flag.clone())
    }
}
