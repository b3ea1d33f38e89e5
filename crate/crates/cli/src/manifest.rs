use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::jobs::Job;
use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to rerun a command: resolved job, full configuration,
/// and every file it reads or writes. Written before the job starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub job: Job,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(job: Job, config: RunConfig) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            tool: "avsep".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            inputs: job.inputs(),
            outputs: job.outputs(),
            seed: config.seed,
            job,
            config,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Artifact(format!("{}: {e}", dir.display())))?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("manifest {}: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(CliError::Artifact(format!(
                "manifest {} has version {}, expected {MANIFEST_VERSION}",
                path.display(),
                m.manifest_version
            )));
        }
        Ok(m)
    }
}
