//! Single-file checkpoint format.
//!
//! ```text
//! "DDAN" | version: u32 LE | manifest length: u64 LE | JSON manifest | payload
//! ```
//!
//! The manifest lists tensor records `{name, shape, offset, byte_length}` in
//! file order; offsets are relative to the start of the payload, which is the
//! concatenation of every tensor as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RngState, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{DDANet, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DDAN";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

const MODEL_PREFIX: &str = "model.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub adam_step: Option<u64>,
    pub best_val_dsc: Option<f64>,
    pub tensors: Vec<TensorRecord>,
}

/// Optimizer moments in model-parameter order.
#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub best_val_dsc: Option<f64>,
    /// Every model tensor (parameters and buffers) in visiting order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    /// Snapshot of a model without optimizer or sampling state.
    pub fn from_model(model: &DDANet<f32>, train_config: TrainConfig) -> Self {
        Checkpoint {
            model_config: model.config().clone(),
            train_config,
            epoch: 0,
            rng: None,
            best_val_dsc: None,
            tensors: model.named_tensors().into_iter().map(|(n, _, t)| (n, t)).collect(),
            adam: None,
        }
    }

    /// Rebuilds the model, checking that names and shapes match the
    /// architecture implied by the stored configuration.
    pub fn to_model(&self) -> Result<DDANet<f32>> {
        let mut model = DDANet::<f32>::build(&self.model_config, 0)?;
        let expected = model.tensor_count();
        if expected != self.tensors.len() {
            return Err(Error::corrupt(
                "tensors",
                format!("{} tensors stored, architecture has {expected}", self.tensors.len()),
            ));
        }
        let mut stored = self.tensors.iter();
        let mut failure = None;
        model.visit_mut("", &mut |name, t, _| {
            let (stored_name, value) = stored.next().expect("counts checked");
            if failure.is_none() && (stored_name != name || value.shape() != t.shape()) {
                failure = Some(Error::corrupt(
                    format!("tensors.{stored_name}"),
                    format!("expected `{name}` with shape {:?}, found {:?}", t.shape(), value.shape()),
                ));
            }
            *t = value.clone();
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    fn records(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> =
            self.tensors.iter().map(|(n, t)| (format!("{MODEL_PREFIX}{n}"), t)).collect();
        if let Some(adam) = &self.adam {
            let params: Vec<&String> = self.param_names();
            for (prefix, moments) in [(ADAM_M_PREFIX, &adam.m), (ADAM_V_PREFIX, &adam.v)] {
                for (name, t) in params.iter().zip(moments) {
                    out.push((format!("{prefix}{name}"), t));
                }
            }
        }
        out
    }

    fn param_names(&self) -> Vec<&String> {
        let params: std::collections::HashSet<String> = DDANet::<f32>::build(&self.model_config, 0)
            .map(|m| {
                m.named_tensors()
                    .into_iter()
                    .filter(|(_, role, _)| *role == crate::layers::TensorRole::Param)
                    .map(|(n, _, _)| n)
                    .collect()
            })
            .unwrap_or_default();
        self.tensors.iter().map(|(n, _)| n).filter(|n| params.contains(*n)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let records = self.records();
        let mut offset = 0u64;
        let mut table = Vec::with_capacity(records.len());
        for (name, t) in &records {
            let byte_length = 4 * t.numel() as u64;
            table.push(TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                byte_length,
            });
            offset += byte_length;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            adam_step: self.adam.as_ref().map(|a| a.t),
            best_val_dsc: self.best_val_dsc,
            tensors: table,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &records {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |range: std::ops::Range<usize>, field: &str| {
            bytes
                .get(range)
                .ok_or_else(|| Error::corrupt(field, "file truncated"))
        };
        if take(0..4, "magic")? != MAGIC {
            return Err(Error::corrupt("magic", "not a DDAN checkpoint"));
        }
        let version = u32::from_le_bytes(take(4..8, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::corrupt(
                "version",
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let len = u64::from_le_bytes(take(8..16, "manifest_length")?.try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| HEADER_LEN.checked_add(l))
            .ok_or_else(|| Error::corrupt("manifest_length", "length overflows"))?;
        let json = take(HEADER_LEN..end, "manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::corrupt("manifest", e.to_string()))?;
        let payload = &bytes[end..];

        let mut expected_offset = 0u64;
        let mut decoded = Vec::with_capacity(manifest.tensors.len());
        for rec in &manifest.tensors {
            let field = format!("tensors.{}", rec.name);
            let numel: usize = rec.shape.iter().product();
            if rec.byte_length != 4 * numel as u64 {
                return Err(Error::corrupt(
                    field,
                    format!("byte_length {} does not match shape {:?}", rec.byte_length, rec.shape),
                ));
            }
            if rec.offset != expected_offset {
                return Err(Error::corrupt(field, format!("offset {} is not contiguous", rec.offset)));
            }
            let start = rec.offset as usize;
            let stop = start + rec.byte_length as usize;
            let raw = payload
                .get(start..stop)
                .ok_or_else(|| Error::corrupt(field.clone(), "payload truncated"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            decoded.push((rec.name.clone(), Tensor::from_parts(rec.shape.clone(), data)));
            expected_offset += rec.byte_length;
        }
        if payload.len() as u64 != expected_offset {
            return Err(Error::corrupt(
                "payload",
                format!("{} trailing bytes", payload.len() as u64 - expected_offset),
            ));
        }

        let mut tensors = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in decoded {
            if let Some(n) = name.strip_prefix(MODEL_PREFIX) {
                tensors.push((n.to_string(), t));
            } else if name.starts_with(ADAM_M_PREFIX) {
                m.push(t);
            } else if name.starts_with(ADAM_V_PREFIX) {
                v.push(t);
            } else {
                return Err(Error::corrupt(format!("tensors.{name}"), "unknown tensor group"));
            }
        }
        let adam = match manifest.adam_step {
            Some(t) => {
                if m.len() != v.len() {
                    return Err(Error::corrupt("tensors", "Adam moment counts differ"));
                }
                Some(AdamSnapshot { t, m, v })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::corrupt("adam_step", "moments stored without a step counter")),
        };
        let ckpt = Checkpoint {
            model_config: manifest.model_config,
            train_config: manifest.train_config,
            epoch: manifest.epoch,
            rng: manifest.rng,
            best_val_dsc: manifest.best_val_dsc,
            tensors,
            adam,
        };
        if let Some(adam) = &ckpt.adam {
            let n_params = ckpt.param_names().len();
            if adam.m.len() != n_params {
                return Err(Error::corrupt(
                    "tensors",
                    format!("{} Adam moments for {n_params} parameters", adam.m.len()),
                ));
            }
        }
        Ok(ckpt)
    }

    /// Reads only the manifest.
    pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
        let len = bytes
            .get(8..16)
            .ok_or_else(|| Error::corrupt("manifest_length", "file truncated"))?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(HEADER_LEN..HEADER_LEN.saturating_add(len))
            .ok_or_else(|| Error::corrupt("manifest", "file truncated"))?;
        serde_json::from_slice(json).map_err(|e| Error::corrupt("manifest", e.to_string()))
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
