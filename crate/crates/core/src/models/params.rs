use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Arch, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub arch: Arch,
    pub seed: u64,
    tensors: IndexMap<String, Tensor>,
}

/// Per-parameter gradients, keyed like [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub(crate) IndexMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    /// Gradients shaped like `params` holding the given flat vector.
    pub fn from_flat(params: &Parameters, flat: &[f64]) -> Result<Self> {
        let mut p = params.clone();
        p.set_flat(flat)?;
        Ok(Gradients(p.tensors))
    }
}

impl Parameters {
    pub fn new(arch: Arch, seed: u64) -> Self {
        Self {
            arch,
            seed,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, parameters have {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    /// Same key set and per-key shapes.
    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

/// Whether the optimizer should treat `name` as a weight matrix (Muon's
/// orthogonalised update) rather than a vector-like parameter. Biases,
/// norms, the positional table, and matrices with a unit dimension (the
/// scalar-input projection and the output head) are vector-like.
pub fn is_matrix_param(name: &str, t: &Tensor) -> bool {
    if t.ndim() < 2 || name.ends_with("pos_embedding") {
        return false;
    }
    let rows = t.shape()[0];
    let cols: usize = t.shape()[1..].iter().product();
    rows > 1 && cols > 1
}

struct Init {
    rng: ChaCha8Rng,
    params: Parameters,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params
            .insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"));
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.insert(name, Tensor::full(shape, v));
    }

    /// Weight `(fan_in, fan_out)` drawn from U(±1/√fan_in) and a zero bias.
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.uniform(
            format!("{prefix}.weight"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
        );
        self.constant(format!("{prefix}.bias"), &[fan_out], 0.0);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.constant(format!("{prefix}.gamma"), &[d], 1.0);
        self.constant(format!("{prefix}.beta"), &[d], 0.0);
    }
}

const POS_EMBED_BOUND: f64 = 0.02;

/// Deterministic initialisation: fan-in-scaled uniform weights, zero biases,
/// unit/zero layer-norm affine terms, small-uniform positional embeddings.
pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut it = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Parameters::new(cfg.arch, seed),
    };
    let l = cfg.lookback;
    let head_in = match cfg.arch {
        Arch::Mlp => {
            let mut prev = l;
            for (i, &d) in cfg.mlp_hidden.iter().enumerate() {
                it.linear(&format!("mlp.{i}"), prev, d);
                prev = d;
            }
            prev
        }
        Arch::Cnn => {
            let mut cin = 1;
            for (i, &c) in cfg.cnn_channels.iter().enumerate() {
                let fan_in = cin * cfg.cnn_kernel;
                it.uniform(
                    format!("conv.{i}.weight"),
                    &[c, cin, cfg.cnn_kernel],
                    1.0 / (fan_in as f64).sqrt(),
                );
                it.constant(format!("conv.{i}.bias"), &[c], 0.0);
                cin = c;
            }
            let mut prev = cin * cfg.cnn_pool;
            for (i, &d) in cfg.cnn_head.iter().enumerate() {
                it.linear(&format!("fc.{i}"), prev, d);
                prev = d;
            }
            prev
        }
        Arch::Lstm => {
            let h = cfg.lstm_hidden;
            let mut input = 1;
            for layer in 0..cfg.lstm_layers {
                it.uniform(
                    format!("lstm.{layer}.w_ih"),
                    &[input, 4 * h],
                    1.0 / (input as f64).sqrt(),
                );
                it.uniform(
                    format!("lstm.{layer}.w_hh"),
                    &[h, 4 * h],
                    1.0 / (h as f64).sqrt(),
                );
                it.constant(format!("lstm.{layer}.bias"), &[4 * h], 0.0);
                input = h;
            }
            h
        }
        Arch::Transformer => {
            let d = cfg.tf_d_model;
            it.linear("input", 1, d);
            it.uniform("pos_embedding".into(), &[l, d], POS_EMBED_BOUND);
            for b in 0..cfg.tf_layers {
                let p = format!("block.{b}");
                it.layer_norm(&format!("{p}.ln1"), d);
                for m in ["wq", "wk", "wv", "wo"] {
                    it.linear(&format!("{p}.attn.{m}"), d, d);
                }
                it.layer_norm(&format!("{p}.ln2"), d);
                it.linear(&format!("{p}.ff1"), d, cfg.tf_ff_mult * d);
                it.linear(&format!("{p}.ff2"), cfg.tf_ff_mult * d, d);
            }
            it.layer_norm("final_ln", d);
            let mut prev = d;
            for (i, &w) in cfg.tf_head.iter().enumerate() {
                it.linear(&format!("fc.{i}"), prev, w);
                prev = w;
            }
            prev
        }
        Arch::Linear => l,
    };
    it.linear("head", head_in, 1);
    Ok(it.params)
}
