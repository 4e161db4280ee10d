//! Checkpoint container, little-endian throughout:
//!
//! ```text
//! "LRASR1" | u32 header length | JSON header | f32 arrays
//! ```
//!
//! The header holds the model config, the output vocabulary if any, the
//! update step, and a table of arrays with byte offsets into the data block.

use std::fs;
use std::path::Path;

use lrasr_core::model::tape::Tensor;
use lrasr_core::model::{ModelConfig, ModelParameters};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"LRASR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    /// Vocabulary file contents, one symbol per entry.
    pub vocab: Option<Vec<String>>,
    pub update_step: u64,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Option<Vec<String>>,
    pub update_step: u64,
    pub params: ModelParameters,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("parameters do not match the stored config: {0}")]
    Params(#[from] lrasr_core::model::ParamsError),
}

fn format(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::with_capacity(self.params.arrays.len());
        let mut offset = 0;
        for (name, t) in &self.params.arrays {
            let (rows, cols) = t.shape();
            arrays.push(ArrayEntry { name: name.clone(), offset, rows, cols });
            offset += 4 * t.data.len();
        }
        let header =
            Header { config: self.config.clone(), vocab: self.vocab.clone(), update_step: self.update_step, arrays };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.arrays.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| format("bad magic bytes"))?;
        if rest.len() < 4 {
            return Err(format("truncated header length"));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().expect("four bytes")) as usize;
        let rest = &rest[4..];
        if rest.len() < len {
            return Err(format("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| format(format!("header: {e}")))?;
        let data = &rest[len..];
        let mut params = ModelParameters { arrays: Default::default() };
        let mut expected_offset = 0;
        for a in &header.arrays {
            let n = a.rows * a.cols;
            if a.offset != expected_offset || a.offset + 4 * n > data.len() {
                return Err(format(format!("array {} lies outside the data block or out of order", a.name)));
            }
            let values = data[a.offset..a.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            if params.arrays.insert(a.name.clone(), Tensor::from_vec(a.rows, a.cols, values)).is_some() {
                return Err(format(format!("array {} listed twice", a.name)));
            }
            expected_offset += 4 * n;
        }
        if expected_offset != data.len() {
            return Err(format("trailing bytes after the last array"));
        }
        header.config.validate().map_err(|e| format(e.to_string()))?;
        params.validate(&header.config)?;
        Ok(Self { config: header.config, vocab: header.vocab, update_step: header.update_step, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes =
            fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
