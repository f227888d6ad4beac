//! SGD, Adam and Muon with decoupled weight decay.
//!
//! Every rule ends with `θ ← θ·(1 − ηλ) − η·u` where `u` is the
//! optimizer-specific direction, so λ means the same thing for all three.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{is_matrix_param, Gradients, Parameters};
use crate::tensor::gemm_acc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Muon,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Muon];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Muon => "muon",
        }
    }

    /// Log-uniform search range for the weight decay.
    pub fn wd_range(self) -> (f64, f64) {
        match self {
            OptimizerKind::Sgd => (1e-5, 1.0),
            OptimizerKind::Adam => (1e-4, 1e-1),
            OptimizerKind::Muon => (1e-5, 5.0),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "muon" => Ok(OptimizerKind::Muon),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Learning-rate search range shared by all optimizers.
pub const LR_RANGE: (f64, f64) = (1e-5, 1e-1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD heavy-ball momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub muon_momentum: f64,
    pub ns_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            muon_momentum: 0.95,
            ns_steps: 5,
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optim.weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("muon_momentum", self.muon_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("optim.{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.ns_steps == 0 {
            return Err(Error::Config("optim.ns_steps must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Moment buffers for one parameter. Unused buffers stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    /// Momentum (SGD, Muon) or first moment (Adam).
    pub m: Vec<f64>,
    /// Adam second moment.
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Steps taken with this state.
    pub t: u64,
    /// Global step at which the state was created.
    pub created_at: usize,
    pub buffers: IndexMap<String, Buffers>,
}

fn uses_adam(kind: OptimizerKind, name: &str, t: &crate::tensor::Tensor) -> bool {
    match kind {
        OptimizerKind::Sgd => false,
        OptimizerKind::Adam => true,
        OptimizerKind::Muon => !is_matrix_param(name, t),
    }
}

impl OptimizerState {
    /// All-zero state for `params`.
    pub fn new(kind: OptimizerKind, params: &Parameters, created_at: usize) -> Self {
        let buffers = params
            .iter()
            .map(|(name, t)| {
                let n = t.len();
                let v = if uses_adam(kind, name, t) { vec![0.0; n] } else { Vec::new() };
                (name.to_string(), Buffers { m: vec![0.0; n], v })
            })
            .collect();
        Self {
            kind,
            t: 0,
            created_at,
            buffers,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.t == 0
            && self
                .buffers
                .values()
                .all(|b| b.m.iter().chain(&b.v).all(|&x| x == 0.0))
    }
}

/// One update in place. The gradient is checked before anything is touched,
/// so a failed step leaves `params` and `state` as they were.
pub fn step(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.kind != cfg.kind {
        return Err(Error::Config(format!(
            "state belongs to {} but config is {}",
            state.kind, cfg.kind
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::shape("gradient key set differs from parameters"));
    }
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::shape(format!("no gradient for `{name}`")))?;
        if g.shape() != t.shape() {
            return Err(Error::shape(format!("gradient shape mismatch for `{name}`")));
        }
        if !g.is_finite() {
            return Err(Error::Numeric {
                layer: format!("gradient of {name}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (eta, lam) = (cfg.lr, cfg.weight_decay);
    let shrink = 1.0 - eta * lam;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let g = grads.get(name).unwrap().data();
        let buf = state.buffers.get_mut(name).ok_or_else(|| Error::shape(format!("no state for `{name}`")))?;
        let adam = uses_adam(cfg.kind, name, theta);
        let shape = theta.shape().to_vec();
        let th = theta.data_mut();
        if adam {
            for i in 0..th.len() {
                buf.m[i] = cfg.beta1 * buf.m[i] + (1.0 - cfg.beta1) * g[i];
                buf.v[i] = cfg.beta2 * buf.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = buf.m[i] / bc1;
                let vh = buf.v[i] / bc2;
                th[i] = th[i] * shrink - eta * mh / (vh.sqrt() + cfg.eps);
            }
        } else if cfg.kind == OptimizerKind::Sgd {
            for i in 0..th.len() {
                buf.m[i] = cfg.momentum * buf.m[i] + g[i];
                th[i] = th[i] * shrink - eta * buf.m[i];
            }
        } else {
            for i in 0..th.len() {
                buf.m[i] = cfg.muon_momentum * buf.m[i] + g[i];
            }
            let rows = shape[0];
            let cols = th.len() / rows;
            let o = newton_schulz(&buf.m, rows, cols, cfg.ns_steps);
            let scale = eta * (rows as f64 / cols as f64).max(1.0).sqrt();
            for i in 0..th.len() {
                th[i] = th[i] * shrink - scale * o[i];
            }
        }
    }
    Ok(())
}

/// Per-step odd quintic coefficients `(a, b, c)` for `aX + b(XXᵀ)X + c(XXᵀ)²X`.
/// Step `k` is the minimax fit of `p(x) ≈ 1` on the interval of singular
/// values left by step `k − 1`, starting from `[0.003, 1]`. After all five
/// steps every input singular value in `[0.003, 1]` lands in
/// `[0.995, 1.005]`; smaller ones are inflated but stay below 1.
const NS_SCHEDULE: [(f64, f64, f64); 5] = [
    (8.383674389708455, -24.765908442691163, 18.357083698493113),
    (4.043421704858364, -3.0114057426295, 0.5695122091854149),
    (3.5055734080423755, -2.6266554298482934, 0.52571944192294),
    (2.4901195480017155, -1.8342782023595814, 0.43683506096471386),
    (1.9177769782974698, -1.296751039610812, 0.3797050132757428),
];
/// Used for any step past the fifth; 1 is an attracting fixed point.
const NS_POLISH: (f64, f64, f64) = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0);

/// Approximate orthogonal polar factor `UVᵀ` of a row-major `(rows, cols)`
/// matrix.
///
/// The input is divided by its Frobenius norm, so every singular value lies
/// in `[0, 1]`, then `steps` quintic iterations `X ← aX + (bA + cA²)X` with
/// `A = XXᵀ` are applied using [`NS_SCHEDULE`]. The zero matrix is returned
/// as is.
pub fn newton_schulz(m: &[f64], rows: usize, cols: usize, steps: usize) -> Vec<f64> {
    assert_eq!(m.len(), rows * cols, "newton_schulz: data does not match shape");
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return m.to_vec();
    }
    // iterate on the wide orientation so the Gram matrix is the small one
    let tall = rows > cols;
    let (r, c) = if tall { (cols, rows) } else { (rows, cols) };
    let mut x = vec![0.0; r * c];
    if tall {
        for i in 0..rows {
            for j in 0..cols {
                x[j * c + i] = m[i * cols + j] / norm;
            }
        }
    } else {
        x.iter_mut().zip(m).for_each(|(d, s)| *d = s / norm);
    }
    let mut a = vec![0.0; r * r];
    let mut a2 = vec![0.0; r * r];
    let mut bx = vec![0.0; r * c];
    for s in 0..steps {
        let (ca, cb, cc) = NS_SCHEDULE.get(s).copied().unwrap_or(NS_POLISH);
        a.fill(0.0);
        gemm_acc(r, c, r, &x, false, &x, true, &mut a);
        a2.fill(0.0);
        gemm_acc(r, r, r, &a, false, &a, false, &mut a2);
        // B = bA + cA², reused in a2
        for (p, q) in a2.iter_mut().zip(&a) {
            *p = cb * q + cc * *p;
        }
        bx.fill(0.0);
        gemm_acc(r, r, c, &a2, false, &x, false, &mut bx);
        for (xi, bi) in x.iter_mut().zip(&bx) {
            *xi = ca * *xi + bi;
        }
    }
    if tall {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = x[j * c + i];
            }
        }
        out
    } else {
        x
    }
}

/// Copies the parameters and pairs them with a zeroed state for `kind`.
/// Nothing carries over from the source optimizer.
pub fn hard_reset(kind: OptimizerKind, source: &Parameters, at_step: usize) -> (Parameters, OptimizerState) {
    let params = source.clone();
    let state = OptimizerState::new(kind, &params, at_step);
    (params, state)
}
