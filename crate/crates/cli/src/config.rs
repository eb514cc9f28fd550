//! Optional TOML run configuration. Every key mirrors a command-line flag;
//! flags given on the command line win.

use std::path::{Path, PathBuf};

use condspec::basis::Rank;
use condspec::ingest::DetrendMode;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub series: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub iters: Option<usize>,
    pub burnin: Option<usize>,
    pub n_j: Option<RankValue>,
    pub n_h: Option<RankValue>,
    pub sigma2_alpha: Option<f64>,
    pub g_scale: Option<f64>,
    pub nu: Option<f64>,
    pub proposal_df: Option<f64>,
    pub detrend: Option<DetrendMode>,
    pub u_points: Option<usize>,
    pub band: Option<String>,
    pub lf_band: Option<String>,
    pub subjects: Option<usize>,
    pub length: Option<usize>,
    pub replicates: Option<usize>,
    pub bandwidth_factor: Option<f64>,
}

/// A rank written either as an integer or as `"auto"`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum RankValue {
    Count(usize),
    Text(String),
}

impl RankValue {
    pub fn to_rank(&self) -> Result<Rank, CliError> {
        match self {
            RankValue::Count(k) => Ok(Rank::Fixed(*k)),
            RankValue::Text(s) => parse_rank(s).map_err(CliError::Usage),
        }
    }
}

pub fn parse_rank(s: &str) -> Result<Rank, String> {
    if s == "auto" {
        return Ok(Rank::fve_auto());
    }
    s.parse::<usize>()
        .map(Rank::Fixed)
        .map_err(|_| format!("rank must be a positive integer or `auto`, got `{s}`"))
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flag value if present, else the config value.
pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>) -> Option<T> {
    flag.or_else(|| file.clone())
}

pub fn require<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("`{name}` is required (flag or config file)")))
}

pub fn existing_file(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!(
            "{what} file {} does not exist",
            path.display()
        )))
    }
}
