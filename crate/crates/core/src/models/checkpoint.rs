//! On-disk model checkpoints.
//!
//! Layout: an 8-byte little-endian `u64` header length, the JSON header
//! (architecture, dimensions, seed, step count, tensor names and shapes),
//! then every tensor as raw little-endian `f64` values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::neural::NeuralNet;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    /// Optimizer steps taken to reach these parameters.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    arch: super::Arch,
    config: ModelConfig,
    seed: u64,
    step: usize,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "optprior-checkpoint-v1";

impl Checkpoint {
    pub fn new(net: &NeuralNet, step: usize) -> Self {
        Self {
            config: net.config.clone(),
            params: net.params.clone(),
            step,
        }
    }

    pub fn net(&self) -> NeuralNet {
        NeuralNet::new(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.into(),
            arch: self.params.arch,
            config: self.config.clone(),
            seed: self.params.seed,
            step: self.step,
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.params.num_params());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Schema(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format != FORMAT {
            return Err(bad(&format!("unknown format `{}`", header.format)));
        }
        let mut params = Parameters::new(header.arch, header.seed);
        let mut off = 8 + hlen;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| bad(&format!("truncated tensor `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(e.name, Tensor::new(e.shape, data)?);
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            params,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
