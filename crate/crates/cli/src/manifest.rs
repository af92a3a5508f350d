use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Record of one run: what was asked for, with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    /// Arguments (after the program name) that replay the run.
    pub argv: Vec<String>,
    /// Resolved option values.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    /// Artifact file names inside the run directory.
    pub outputs: Vec<String>,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }
}
