//! Forward passes for the neural architectures, recorded on a [`Tape`].

use super::config::{Arch, ModelConfig};
use super::params::Parameters;
use super::Forecaster;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows per forward pass when predicting large matrices.
pub const PREDICT_CHUNK: usize = 1024;

/// Parameters placed on a tape, addressable by name.
pub(crate) struct Bound<'a> {
    params: &'a Parameters,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub(crate) fn new(tape: &mut Tape, params: &'a Parameters, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { params, vars }
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))
    }
}

fn linear(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = tape.matmul(x, p.get(&format!("{prefix}.weight"))?)?;
    tape.add_broadcast(h, p.get(&format!("{prefix}.bias"))?)
}

fn relu_stack(tape: &mut Tape, p: &Bound, mut h: Var, prefix: &str, n: usize) -> Result<Var> {
    for i in 0..n {
        let name = format!("{prefix}.{i}");
        h = linear(tape, p, h, &name)?;
        h = tape.relu(h);
        tape.check_finite(h, &name)?;
    }
    Ok(h)
}

/// Records the forward pass for `x (B, L)` and returns the `(B, 1)` output.
pub(crate) fn forward(cfg: &ModelConfig, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.lookback {
        return Err(Error::shape(format!(
            "inputs {:?} do not match lookback {}",
            shape, cfg.lookback
        )));
    }
    let batch = shape[0];
    let h = match cfg.arch {
        Arch::Mlp => relu_stack(tape, p, x, "mlp", cfg.mlp_hidden.len())?,
        Arch::Cnn => cnn_body(cfg, tape, p, x, batch)?,
        Arch::Lstm => lstm_body(cfg, tape, p, x, batch)?,
        Arch::Transformer => transformer_body(cfg, tape, p, x, batch)?,
        Arch::Linear => x,
    };
    let out = linear(tape, p, h, "head")?;
    tape.check_finite(out, "head")?;
    Ok(out)
}

fn cnn_body(cfg: &ModelConfig, tape: &mut Tape, p: &Bound, x: Var, batch: usize) -> Result<Var> {
    let mut h = tape.reshape(x, &[batch, 1, cfg.lookback])?;
    for i in 0..cfg.cnn_channels.len() {
        let w = p.get(&format!("conv.{i}.weight"))?;
        let b = p.get(&format!("conv.{i}.bias"))?;
        h = tape.conv1d(h, w, b, cfg.cnn_padding)?;
        h = tape.relu(h);
        tape.check_finite(h, &format!("conv.{i}"))?;
    }
    h = tape.adaptive_avg_pool1d(h, cfg.cnn_pool)?;
    let c = *cfg.cnn_channels.last().unwrap();
    h = tape.reshape(h, &[batch, c * cfg.cnn_pool])?;
    relu_stack(tape, p, h, "fc", cfg.cnn_head.len())
}

/// Standard LSTM cell (input, forget, cell, output gate order), no
/// peepholes; the readout is the top layer's hidden state at the last step.
fn lstm_body(cfg: &ModelConfig, tape: &mut Tape, p: &Bound, x: Var, _batch: usize) -> Result<Var> {
    let hdim = cfg.lstm_hidden;
    let mut seq: Vec<Var> = (0..cfg.lookback)
        .map(|t| tape.slice_cols(x, t, 1))
        .collect::<Result<_>>()?;
    for layer in 0..cfg.lstm_layers {
        let w_ih = p.get(&format!("lstm.{layer}.w_ih"))?;
        let w_hh = p.get(&format!("lstm.{layer}.w_hh"))?;
        let bias = p.get(&format!("lstm.{layer}.bias"))?;
        let mut out = Vec::with_capacity(seq.len());
        let mut state: Option<(Var, Var)> = None;
        for &xt in &seq {
            let mut z = tape.matmul(xt, w_ih)?;
            if let Some((h, _)) = state {
                let r = tape.matmul(h, w_hh)?;
                z = tape.add(z, r)?;
            }
            z = tape.add_broadcast(z, bias)?;
            let zi = tape.slice_cols(z, 0, hdim)?;
            let zf = tape.slice_cols(z, hdim, hdim)?;
            let zg = tape.slice_cols(z, 2 * hdim, hdim)?;
            let zo = tape.slice_cols(z, 3 * hdim, hdim)?;
            let (i, f, g, o) = (
                tape.sigmoid(zi),
                tape.sigmoid(zf),
                tape.tanh(zg),
                tape.sigmoid(zo),
            );
            let ig = tape.mul(i, g)?;
            // zero initial state: c₀ = i⊙g, and the recurrent matmul is skipped
            let c = match state {
                Some((_, c_prev)) => {
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc)?;
            out.push(h);
            state = Some((h, c));
        }
        let last = *out.last().unwrap();
        tape.check_finite(last, &format!("lstm.{layer}"))?;
        seq = out;
    }
    Ok(*seq.last().unwrap())
}

fn transformer_body(
    cfg: &ModelConfig,
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    batch: usize,
) -> Result<Var> {
    let (l, d, heads) = (cfg.lookback, cfg.tf_d_model, cfg.tf_heads);
    let dh = d / heads;
    let xs = tape.reshape(x, &[batch * l, 1])?;
    let e = linear(tape, p, xs, "input")?;
    let e = tape.reshape(e, &[batch, l, d])?;
    let mut e = tape.add_broadcast(e, p.get("pos_embedding")?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    for b in 0..cfg.tf_layers {
        let pre = format!("block.{b}");
        // attention sub-block
        let n1 = tape.layer_norm(
            e,
            p.get(&format!("{pre}.ln1.gamma"))?,
            p.get(&format!("{pre}.ln1.beta"))?,
        )?;
        let n1 = tape.reshape(n1, &[batch * l, d])?;
        let heads_of = |tape: &mut Tape, m: &str| -> Result<Var> {
            let v = linear(tape, p, n1, &format!("{pre}.attn.{m}"))?;
            let v = tape.reshape(v, &[batch, l, heads, dh])?;
            let v = tape.swap_axes12(v)?;
            tape.reshape(v, &[batch * heads, l, dh])
        };
        let q = heads_of(tape, "wq")?;
        let k = heads_of(tape, "wk")?;
        let v = heads_of(tape, "wv")?;
        let o = tape.attention(q, k, v, scale)?;
        let o = tape.reshape(o, &[batch, heads, l, dh])?;
        let o = tape.swap_axes12(o)?;
        let o = tape.reshape(o, &[batch * l, d])?;
        let o = linear(tape, p, o, &format!("{pre}.attn.wo"))?;
        let o = tape.reshape(o, &[batch, l, d])?;
        e = tape.add(e, o)?;
        // feed-forward sub-block
        let n2 = tape.layer_norm(
            e,
            p.get(&format!("{pre}.ln2.gamma"))?,
            p.get(&format!("{pre}.ln2.beta"))?,
        )?;
        let n2 = tape.reshape(n2, &[batch * l, d])?;
        let f = linear(tape, p, n2, &format!("{pre}.ff1"))?;
        let f = tape.relu(f);
        let f = linear(tape, p, f, &format!("{pre}.ff2"))?;
        let f = tape.reshape(f, &[batch, l, d])?;
        e = tape.add(e, f)?;
        tape.check_finite(e, &pre)?;
    }
    let e = tape.layer_norm(e, p.get("final_ln.gamma")?, p.get("final_ln.beta")?)?;
    let pooled = tape.mean_axis1(e)?;
    relu_stack(tape, p, pooled, "fc", cfg.tf_head.len())
}

/// Forecasts for every row of `inputs (n, L)`. Rows are processed in
/// chunks; no state is shared between rows.
pub fn predict(cfg: &ModelConfig, params: &Parameters, inputs: &Tensor) -> Result<Vec<f64>> {
    if inputs.ndim() != 2 || inputs.cols() != cfg.lookback {
        return Err(Error::shape(format!(
            "inputs {:?} do not match lookback {}",
            inputs.shape(),
            cfg.lookback
        )));
    }
    if params.arch != cfg.arch {
        return Err(Error::shape(format!(
            "parameters are for {} but config is {}",
            params.arch, cfg.arch
        )));
    }
    let n = inputs.rows();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = inputs.select_rows(&idx);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let x = tape.constant(chunk);
        let y = forward(cfg, &mut tape, &bound, x)?;
        out.extend_from_slice(tape.value(y).data());
        start = end;
    }
    Ok(out)
}

/// A network configuration paired with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNet {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl NeuralNet {
    pub fn new(config: ModelConfig, params: Parameters) -> Self {
        Self { config, params }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = super::params::init(&config, seed)?;
        Ok(Self { config, params })
    }
}

impl Forecaster for NeuralNet {
    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn predict(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        predict(&self.config, &self.params, inputs)
    }
}
