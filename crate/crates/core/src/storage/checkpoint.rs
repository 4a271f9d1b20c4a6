//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   8   magic "ENDOCKPT"
//! 8   4   format version (u32, currently 1)
//! 12  4   header length H in bytes (u32)
//! 16  32  SHA-256 of header ‖ payload
//! 48  H   header, UTF-8 JSON
//! 48+H    payload: tensors back to back, row-major, little-endian
//! ```
//!
//! The header holds the model config, the tokenizer content hash, a tensor
//! table `{name, dtype, shape, offset}` (offset relative to the payload
//! start), the optimizer step when moments are stored, and free-form training
//! metadata. Optimizer moments are stored as tensors named `optim.m.<param>`
//! and `optim.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ENDOCKPT";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 48;
const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (file corrupted)")]
    ChecksumMismatch,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("shape mismatch for tensor `{name}`: checkpoint {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in checkpoint")]
    UnexpectedTensor(String),
    #[error("tokenizer mismatch: checkpoint was trained with {expected}, got {found}")]
    TokenizerMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tokenizer_hash: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    optimizer_step: Option<u64>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Adam moments aligned with the parameter store's entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub model: ModelConfig,
    pub tokenizer_hash: String,
    pub params: ParamStore<F>,
    pub optimizer: Option<OptimizerSnapshot<F>>,
    pub meta: serde_json::Value,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, t: &Tensor<F>| {
            tensors.push(TensorEntry {
                name,
                dtype: F::DTYPE,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        };
        for e in self.params.entries() {
            push(e.name.clone(), &e.value);
        }
        if let Some(opt) = &self.optimizer {
            for (e, m) in self.params.entries().iter().zip(&opt.m) {
                push(format!("{MOMENT1}{}", e.name), m);
            }
            for (e, v) in self.params.entries().iter().zip(&opt.v) {
                push(format!("{MOMENT2}{}", e.name), v);
            }
        }
        let header = Header {
            model: self.model.clone(),
            tokenizer_hash: self.tokenizer_hash.clone(),
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut hasher = Sha256::new();
        hasher.update(&header);
        hasher.update(&payload);
        let digest = hasher.finalize();

        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and verifies a checkpoint. With `expected`, the tensor table
    /// must match that config's parameters exactly; otherwise the config
    /// stored in the header is used.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREFIX_LEN {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[PREFIX_LEN..];
        if body.len() < header_len {
            return Err(CheckpointError::Truncated);
        }
        let (header_bytes, payload) = body.split_at(header_len);
        let header: Header = match serde_json::from_slice(header_bytes) {
            Ok(h) => h,
            Err(e) => {
                if Sha256::digest(body).as_slice() != &bytes[16..48] {
                    return Err(CheckpointError::ChecksumMismatch);
                }
                return Err(CheckpointError::Header(e.to_string()));
            }
        };
        let needed = header
            .tensors
            .iter()
            .map(|t| t.offset as usize + t.shape.iter().product::<usize>() * t.dtype.size())
            .max()
            .unwrap_or(0);
        if payload.len() < needed {
            return Err(CheckpointError::Truncated);
        }
        if Sha256::digest(body).as_slice() != &bytes[16..48] {
            return Err(CheckpointError::ChecksumMismatch);
        }

        let model = expected.unwrap_or(&header.model);
        let specs = model.param_specs();
        let table: std::collections::HashMap<&str, &TensorEntry> =
            header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, shape) in &specs {
            let entry = table.get(name.as_str()).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if &entry.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
        }
        let spec_names: std::collections::HashSet<&str> = specs.iter().map(|(n, _)| n.as_str()).collect();
        for t in &header.tensors {
            let base = t
                .name
                .strip_prefix(MOMENT1)
                .or_else(|| t.name.strip_prefix(MOMENT2))
                .unwrap_or(&t.name);
            if !spec_names.contains(base) {
                return Err(CheckpointError::UnexpectedTensor(t.name.clone()));
            }
        }

        let read = |e: &TensorEntry| -> Tensor<F> {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let size = e.dtype.size();
            let data: Vec<F> = (0..n)
                .map(|i| {
                    let b = &payload[start + i * size..start + (i + 1) * size];
                    match e.dtype {
                        DType::F32 => F::of(f32::read_le(b) as f64),
                        DType::F64 => F::of(f64::read_le(b)),
                    }
                })
                .collect();
            Tensor::new(e.shape.clone(), data).expect("table shape")
        };
        let mut params = ParamStore::new();
        for (name, _) in &specs {
            params
                .insert(name.clone(), read(table[name.as_str()]))
                .map_err(|e| CheckpointError::Header(e.to_string()))?;
        }
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for e in params.entries() {
                    for (prefix, out) in [(MOMENT1, &mut m), (MOMENT2, &mut v)] {
                        let name = format!("{prefix}{}", e.name);
                        let entry = table.get(name.as_str()).ok_or(CheckpointError::MissingTensor(name.clone()))?;
                        if entry.shape != e.value.shape() {
                            return Err(CheckpointError::ShapeMismatch {
                                name,
                                expected: e.value.shape().to_vec(),
                                found: entry.shape.clone(),
                            });
                        }
                        out.push(read(entry));
                    }
                }
                Some(OptimizerSnapshot { step, m, v })
            }
        };
        Ok(Checkpoint {
            model: model.clone(),
            tokenizer_hash: header.tokenizer_hash,
            params,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn require_tokenizer(&self, hash: &str) -> Result<(), CheckpointError> {
        if self.tokenizer_hash != hash {
            return Err(CheckpointError::TokenizerMismatch {
                expected: self.tokenizer_hash.clone(),
                found: hash.to_string(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: &Path) -> crate::error::Result<()> {
    super::write_atomic(path, &ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> crate::error::Result<Checkpoint<F>> {
    let bytes = std::fs::read(path)?;
    Ok(Checkpoint::from_bytes(&bytes, expected)?)
}
