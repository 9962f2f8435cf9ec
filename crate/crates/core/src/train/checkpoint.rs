//! Checkpoint files.
//!
//! Layout: a length-prefixed JSON header (configs, parameter names and
//! frozen flags, optimizer entry names, iteration, best validation match
//! ratio), then one tensor block per parameter in canonical order, then the
//! first and second moment blocks of every optimizer entry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamState, Moments};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::Model;
use crate::scalar::{Precision, Scalar};
use crate::tensor::io::{read_json_chunk, read_tensor, write_json_chunk, write_tensor};
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, Param};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub iteration: u64,
    pub best_val_match_ratio: Option<f64>,
    pub params: Vec<ParamEntry>,
    pub optimizer_step: u64,
    pub optimizer: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: TrainConfig,
    pub optimizer: AdamState<T>,
    pub iteration: u64,
    pub best_val_match_ratio: Option<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA,
            dtype: T::DTYPE.to_string(),
            model: self.model.config.clone(),
            lora: self.model.lora.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            best_val_match_ratio: self.best_val_match_ratio,
            params: self
                .model
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    frozen: p.frozen(),
                })
                .collect(),
            optimizer_step: self.optimizer.step,
            optimizer: self.optimizer.entries.iter().map(|e| e.name.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_json_chunk(&self.header(), &mut out);
        for p in self.model.params() {
            write_tensor(&p.tensor.detached(), &mut out);
        }
        for e in &self.optimizer.entries {
            for v in [&e.m, &e.v] {
                let t = Tensor::new(vec![v.len()], v.clone()).expect("moments are non-empty");
                write_tensor(&t, &mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let h: CheckpointHeader = read_json_chunk(bytes, &mut pos)?;
        if h.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Data(format!("unsupported checkpoint schema {}", h.schema_version)));
        }
        if h.dtype != T::DTYPE {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, expected {}",
                h.dtype,
                T::DTYPE
            )));
        }
        let mut params = Vec::with_capacity(h.params.len());
        for entry in &h.params {
            let t: Tensor<T> = read_tensor(bytes, &mut pos)?;
            params.push(Param::new(entry.name.clone(), t.with_requires_grad(!entry.frozen)));
        }
        let model = Model::from_params(&h.model, &h.lora, params)?;
        for (p, entry) in model.params().iter().zip(&h.params) {
            if p.frozen() != entry.frozen {
                return Err(Error::Data(format!("frozen flag of {} disagrees with config", entry.name)));
            }
        }
        let mut entries = Vec::with_capacity(h.optimizer.len());
        for name in &h.optimizer {
            let m: Tensor<T> = read_tensor(bytes, &mut pos)?;
            let v: Tensor<T> = read_tensor(bytes, &mut pos)?;
            entries.push(Moments {
                name: name.clone(),
                m: m.into_data(),
                v: v.into_data(),
            });
        }
        if pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint", bytes.len() - pos)));
        }
        Ok(Self {
            model,
            train: h.train,
            optimizer: AdamState {
                step: h.optimizer_step,
                entries,
            },
            iteration: h.iteration,
            best_val_match_ratio: h.best_val_match_ratio,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e))
    }
}

/// Reads only the header of a checkpoint file.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_json_chunk(&bytes, &mut 0).map_err(|e| Error::format(path, e))
}

/// Precision a checkpoint was written with.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let h = read_header(path)?;
    Precision::from_dtype(&h.dtype).ok_or_else(|| Error::format(path, format!("unknown dtype {}", h.dtype)))
}
