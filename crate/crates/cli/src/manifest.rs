use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use condspec::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Files that may differ between identical runs and are left out of the
/// output digests.
pub const UNTRACKED: [&str; 2] = ["manifest.json", "timing.json"];

/// Provenance record written into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    /// Effective settings after merging flags over the config file.
    pub settings: serde_json::Value,
    /// Path as given mapped to its SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// File name mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(
        command: &str,
        seed: Option<u64>,
        config_hash: String,
        settings: serde_json::Value,
    ) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_hash,
            settings,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Digests every regular file in `dir` except the untracked ones, then
    /// writes `dir/manifest.json`.
    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::Usage(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for path in names {
            let name = path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .to_string();
            if UNTRACKED.contains(&name.as_str()) {
                continue;
            }
            let bytes = std::fs::read(&path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            self.outputs.insert(name, sha256_hex(&bytes));
        }
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_text(&dir.join("manifest.json"), &json)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid manifest {}: {e}", path.display())))
}
