use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use confrank_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Invocation;
use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

/// Everything needed to reproduce a run, plus its bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub invocation: Invocation,
    /// Effective training configuration, when the command trains.
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    /// Files written into the output directory.
    pub outputs: Vec<String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest_inputs(paths: &[PathBuf]) -> Result<Vec<InputDigest>, Failure> {
    paths
        .iter()
        .map(|path| {
            Ok(InputDigest {
                path: path.clone(),
                sha256: sha256_file(path)?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn start(invocation: Invocation, config: Option<TrainConfig>, inputs: Vec<InputDigest>) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA,
            tool: env!("CARGO_PKG_NAME").to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: invocation.seed(),
            invocation,
            config,
            inputs,
            outputs: Vec::new(),
            started_at: unix_now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn finish(&mut self, result: &Result<Vec<String>, Failure>) {
        self.finished_at = Some(unix_now());
        match result {
            Ok(outputs) => {
                self.outputs = outputs.clone();
                self.status = RunStatus::Succeeded;
            }
            Err(failure) => {
                self.status = RunStatus::Failed;
                self.error = Some(failure.message.clone());
            }
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Failure::data(format!("{}: invalid manifest: {e}", path.display())))?;
        if manifest.schema_version != MANIFEST_SCHEMA {
            return Err(Failure::data(format!(
                "{}: unsupported manifest schema {}",
                path.display(),
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }

    /// Fails if any recorded input changed since the original run.
    pub fn verify_inputs(&self) -> Result<(), Failure> {
        for input in &self.inputs {
            let actual = sha256_file(&input.path)?;
            if actual != input.sha256 {
                return Err(Failure::data(format!(
                    "{}: content changed since the recorded run (sha256 {actual}, manifest {})",
                    input.path.display(),
                    input.sha256
                )));
            }
        }
        Ok(())
    }
}
