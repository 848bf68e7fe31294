//! `diffwin-ckpt-v1` checkpoint files.
//!
//! A single line of JSON header, a `\n`, then every tensor as little-endian
//! `f64` values in header order. Header offsets are byte offsets into the data
//! section and must tile it exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "diffwin-ckpt-v1";

/// Headers beyond this size are rejected before parsing.
pub const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form JSON stored alongside the weights (task, vocabulary, step).
    pub metadata: Value,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: Value) -> Self {
        Self {
            config: model.config().clone(),
            metadata,
            names: model.params().names().to_vec(),
            tensors: model.params().tensors().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() * 8;
                entry
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION.to_string(),
            model: self.config.clone(),
            tensors,
            metadata: self.metadata.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        out.reserve(offset);
        for t in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let limit = bytes.len().min(MAX_HEADER_BYTES + 1);
        let newline = bytes[..limit]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("no header line"))?;
        // Check the version before strict parsing so a foreign file gets a
        // clear message.
        let raw: Value = serde_json::from_slice(&bytes[..newline]).map_err(|e| bad(format!("header: {e}")))?;
        match raw.get("version").and_then(Value::as_str) {
            Some(CHECKPOINT_VERSION) => {}
            Some(other) => return Err(bad(format!("version {other:?}, expected {CHECKPOINT_VERSION:?}"))),
            None => return Err(bad("header has no version")),
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| bad(format!("header: {e}")))?;
        header.model.validate().map_err(|e| bad(format!("model config: {e}")))?;
        let data = &bytes[newline + 1..];
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0usize;
        for entry in header.tensors {
            if entry.offset != expected {
                return Err(bad(format!("tensor {:?} at offset {}, expected {expected}", entry.name, entry.offset)));
            }
            if names.contains(&entry.name) {
                return Err(bad(format!("duplicate tensor {:?}", entry.name)));
            }
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| bad(format!("tensor {:?} is too large", entry.name)))?;
            let end = expected
                .checked_add(count)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| bad(format!("tensor {:?} runs past the end of the file", entry.name)))?;
            let values = data[expected..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape, values).map_err(|e| bad(format!("tensor {:?}: {e}", entry.name)))?;
            names.push(entry.name);
            tensors.push(t);
            expected = end;
        }
        if expected != data.len() {
            return Err(bad(format!("{} trailing bytes", data.len() - expected)));
        }
        Ok(Self {
            config: header.model,
            metadata: header.metadata,
            names,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model; names and shapes must match the architecture
    /// implied by the stored config.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        model.params_mut().load_values(&self.names, self.tensors.clone())?;
        Ok(model)
    }

    /// Elementwise mean of checkpoints sharing one layout. Metadata comes from
    /// the last one.
    pub fn average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
        let last = checkpoints.last().ok_or(Error::Empty("checkpoint list"))?;
        for c in checkpoints {
            let same = c.config == last.config
                && c.names == last.names
                && c.tensors.iter().zip(&last.tensors).all(|(a, b)| a.shape() == b.shape());
            if !same {
                return Err(bad("cannot average checkpoints with different layouts"));
            }
        }
        let k = checkpoints.len() as f64;
        let tensors = (0..last.tensors.len())
            .map(|i| {
                let mean = (0..last.tensors[i].len())
                    .map(|j| {
                        let first = checkpoints[0].tensors[i].data()[j];
                        let values = checkpoints.iter().map(|c| c.tensors[i].data()[j]);
                        // Equal inputs stay bit-exact; 3x/3 need not round back to x.
                        if values.clone().all(|x| x == first) {
                            first
                        } else {
                            values.sum::<f64>() / k
                        }
                    })
                    .collect();
                Tensor::new(last.tensors[i].shape().to_vec(), mean)
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            tensors,
            ..last.clone()
        })
    }
}
