//! Model checkpoints.
//!
//! Layout: a `PETSEG-CKPT <version>` line, a line with the JSON header length in bytes,
//! the JSON header (model config, loss weights, bookkeeping, and the name, shape and
//! offset of every parameter array), then all parameters as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{build_model, ModelConfig, SegModel};
use crate::nn::Module;

const MAGIC: &str = "PETSEG-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub epoch: usize,
    pub val_dice: f64,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model with the state saved alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SegModel,
    pub loss_weights: LossWeights,
    pub epoch: usize,
    pub val_dice: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut offset = 0;
        self.model.visit("", &mut |name, p| {
            tensors.push(TensorEntry { name: name.to_string(), shape: p.shape.clone(), offset });
            offset += p.len();
            for v in &p.value {
                data.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = CheckpointHeader {
            version: VERSION,
            model: self.model.config().clone(),
            loss_weights: self.loss_weights,
            epoch: self.epoch,
            val_dice: self.val_dice,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = format!("{MAGIC} {VERSION}\n{}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let (line1, rest) = split_line(bytes).ok_or_else(|| bad("missing magic line"))?;
        let magic = format!("{MAGIC} {VERSION}");
        if line1 != magic.as_bytes() {
            return Err(bad(&format!("unsupported header {:?}", String::from_utf8_lossy(line1))));
        }
        let (line2, rest) = split_line(rest).ok_or_else(|| bad("missing header length"))?;
        let len: usize = std::str::from_utf8(line2)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad header length"))?;
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = &rest[len..];
        let mut model = build_model(&header.model)?;
        let expected = model.param_names();
        if expected.len() != header.tensors.len() {
            return Err(bad("tensor count does not match architecture"));
        }
        let mut err = None;
        let mut i = 0;
        model.visit_mut("", &mut |name, p| {
            let entry = &header.tensors[i];
            i += 1;
            if err.is_some() {
                return;
            }
            if entry.name != name || entry.shape != p.shape {
                err = Some(format!("tensor {} {:?} does not match {name} {:?}", entry.name, entry.shape, p.shape));
                return;
            }
            let start = entry.offset * 4;
            let end = start + p.len() * 4;
            if end > data.len() {
                err = Some(format!("tensor {name} runs past end of data"));
                return;
            }
            for (v, c) in p.value.iter_mut().zip(data[start..end].chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        Ok(Self { model, loss_weights: header.loss_weights, epoch: header.epoch, val_dice: header.val_dice })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split_line(b: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = b.iter().position(|&c| c == b'\n')?;
    Some((&b[..i], &b[i + 1..]))
}
