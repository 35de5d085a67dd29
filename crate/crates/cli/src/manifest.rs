//! Run manifests and content-addressed run directories.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    /// Every setting the command ran with, defaults included.
    pub config: serde_json::Value,
    pub config_digest: String,
    pub inputs: Vec<InputDigest>,
    pub started_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest_inputs(paths: &[&Path]) -> Result<Vec<InputDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.to_path_buf(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, inputs: Vec<InputDigest>) -> Self {
        let config = serde_json::to_value(config).expect("configs serialize");
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_string(&config).expect("value serializes").as_bytes());
        for input in &inputs {
            hasher.update([0]);
            hasher.update(input.sha256.as_bytes());
        }
        Self {
            command: command.to_string(),
            artifact_version: ARTIFACT_VERSION.to_string(),
            config,
            config_digest: hex::encode(hasher.finalize()),
            inputs,
            started_at: unix_now(),
            finished_at: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: not a run manifest: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifests serialize") + "\n";
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    /// The recorded config, for a replay of `command`.
    pub fn config_for<C: for<'de> Deserialize<'de>>(&self, command: &str) -> Result<C, CliError> {
        if self.command != command {
            return Err(CliError::Usage(format!(
                "manifest is for `{}`, not `{command}`",
                self.command
            )));
        }
        serde_json::from_value(self.config.clone())
            .map_err(|e| CliError::Data(format!("manifest config does not fit `{command}`: {e}")))
    }

    /// Fails when an input file no longer has its recorded digest.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for input in &self.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                return Err(CliError::Data(format!(
                    "{} changed since the manifest was written (sha256 {now}, recorded {})",
                    input.path.display(),
                    input.sha256
                )));
            }
        }
        Ok(())
    }

    /// `root/<command>-<first 16 hex digits of the digest>`, created fresh.
    pub fn create_run_dir(&self, root: &Path) -> Result<PathBuf, CliError> {
        let dir = root.join(format!("{}-{}", self.command, &self.config_digest[..16]));
        if dir.exists() {
            return Err(CliError::Usage(format!(
                "{} already exists; the same run was done before (pass a different --out to repeat it)",
                dir.display()
            )));
        }
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }
}

/// Manifest location for a single-file output.
pub fn sidecar_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_config_and_inputs() {
        let input = |h: &str| InputDigest {
            path: "d.jsonl".into(),
            sha256: h.into(),
        };
        let a = RunManifest::new("train", &serde_json::json!({"alpha": 5.0}), vec![input("aa")]);
        let b = RunManifest::new("train", &serde_json::json!({"alpha": 5.0}), vec![input("aa")]);
        assert_eq!(a.config_digest, b.config_digest);
        let c = RunManifest::new("train", &serde_json::json!({"alpha": 10.0}), vec![input("aa")]);
        let d = RunManifest::new("train", &serde_json::json!({"alpha": 5.0}), vec![input("ab")]);
        assert_ne!(a.config_digest, c.config_digest);
        assert_ne!(a.config_digest, d.config_digest);
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar_for(Path::new("out/gen.jsonl")), PathBuf::from("out/gen.jsonl.manifest.json"));
    }
}
