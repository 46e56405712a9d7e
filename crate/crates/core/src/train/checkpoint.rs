//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `HMOECKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then every
//! tensor as little-endian `f64` in parameter order (model weights, then the
//! Adam moments when present).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::EvalRecord;
use crate::backbone::{FeatureBlock, ResidualBlock};
use crate::config::ExperimentConfig;
use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{BlockKindTag, SrModel};
use crate::params::{Parameters, zeros_like};

pub const MAGIC: &[u8; 8] = b"HMOECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<B = ResidualBlock> {
    pub config: ExperimentConfig,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub model: SrModel<B>,
    pub optimizer: Option<Adam<SrModel<B>>>,
    pub best: Option<EvalRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    t: u64,
    betas: [f64; 2],
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    iteration: u64,
    /// Resolved config as TOML text.
    config: String,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    best: Option<EvalRecord>,
}

fn push_tensors<M: Parameters>(model: &M, out: &mut Vec<u8>) {
    for t in model.named_tensors() {
        for v in t.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn fill_tensors<M: Parameters>(model: &mut M, data: &mut &[u8]) -> Result<()> {
    for mut t in model.tensors_mut() {
        let need = t.len() * 8;
        if data.len() < need {
            return Err(Error::Checkpoint("tensor data is truncated".into()));
        }
        let (head, rest) = data.split_at(need);
        for (dst, chunk) in t.iter_mut().zip(head.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        *data = rest;
    }
    Ok(())
}

impl<B: FeatureBlock + BlockKindTag> Checkpoint<B> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: crate::VERSION.into(),
            iteration: self.iteration,
            config: self.config.to_toml_string(),
            tensors: self
                .model
                .named_tensors()
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.value.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                t: o.t,
                betas: o.betas,
                eps: o.eps,
            }),
            best: self.best.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + 24 * self.model.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_tensors(&self.model, &mut out);
        if let Some(o) = &self.optimizer {
            push_tensors(&o.m, &mut out);
            push_tensors(&o.v, &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(Error::Checkpoint("header is truncated".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        let config = ExperimentConfig::from_toml_str(&header.config)?;
        // Weights are overwritten below; the seed only fixes non-trainable state.
        let mut model = SrModel::<B>::from_seed(&config, 0)?;
        {
            let named = model.named_tensors();
            let matches = named.len() == header.tensors.len()
                && named
                    .iter()
                    .zip(&header.tensors)
                    .all(|(t, e)| t.name == e.name && t.value.shape() == e.shape.as_slice());
            if !matches {
                return Err(Error::Checkpoint(
                    "tensor layout does not match the model built from its config".into(),
                ));
            }
        }
        let mut data = &body[len..];
        fill_tensors(&mut model, &mut data)?;
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut m = zeros_like(&model);
                let mut v = zeros_like(&model);
                fill_tensors(&mut m, &mut data)?;
                fill_tensors(&mut v, &mut data)?;
                Some(Adam {
                    m,
                    v,
                    t: h.t,
                    betas: h.betas,
                    eps: h.eps,
                })
            }
            None => None,
        };
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint {
            config,
            iteration: header.iteration,
            model,
            optimizer,
            best: header.best,
        })
    }

    /// Writes atomically (temp file then rename) and returns the file's SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
