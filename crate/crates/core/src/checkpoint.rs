//! `SYMN` binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SYMN" | version: u32 = 1 | count: u32
//! count x { name_len: u32 | name: UTF-8 | rank: u32 | dims: rank x u64 | data: numel x f64 }
//! ```
//!
//! A model checkpoint at `path` has its [`ModelConfig`] in a JSON sidecar at
//! `path.with_extension("json")`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SYMN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("config sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
    #[error("checkpoint does not match its config: {0}")]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses entries in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Format("bad magic (expected SYMN)".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| CheckpointError::Format(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| CheckpointError::Format(format!("`{name}`: shape {shape:?} overflows")))?;
        let raw = cur.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("`{name}`: {e}")))?;
        entries.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after last entry",
            bytes.len() - cur.pos
        )));
    }
    Ok(entries)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_config(path: &Path, config: &ModelConfig) -> Result<(), CheckpointError> {
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(config).expect("config serializes") + "\n";
    fs::write(&side, text).map_err(io_err(&side))
}

pub fn read_config(path: &Path) -> Result<ModelConfig, CheckpointError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| CheckpointError::Sidecar {
        path: side.display().to_string(),
        message: e.to_string(),
    })
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    write_file(path, &encode(params.iter().map(|(k, v)| (k.as_str(), v))))?;
    write_config(path, params.config())
}

/// Loads a model checkpoint. Entries outside the model layout (e.g.
/// optimizer state) are ignored.
pub fn load_model(path: &Path) -> Result<ModelParams, CheckpointError> {
    let config = read_config(path)?;
    let tensors: BTreeMap<String, Tensor> = read_file(path)?
        .into_iter()
        .filter(|(k, _)| !k.starts_with(crate::trainer::STATE_PREFIX))
        .collect();
    Ok(ModelParams::from_tensors(config, tensors)?)
}
