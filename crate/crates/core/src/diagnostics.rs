//! Probes of what a trained model computes: impulse responses, response and
//! difference surfaces, permutation Shapley attributions, and the ensemble
//! ambiguity decomposition.
//!
//! All probes treat the model as a black box through [`Forecaster`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Forecaster;
use crate::tensor::Tensor;
use crate::train::nmse;

/// 81 shocks from −4 to 4 in steps of 0.1.
pub fn default_deltas() -> Vec<f64> {
    (0..81).map(|i| -4.0 + 0.1 * i as f64).collect()
}

/// Model output at `δ·e_k` for each δ; every other lag sits at the
/// standardized mean, 0.
pub fn impulse_response<F: Forecaster + ?Sized>(model: &F, k: usize, deltas: &[f64]) -> Result<Vec<f64>> {
    let l = model.lookback();
    if k >= l {
        return Err(Error::OutOfRange(format!("lag {k} outside a window of {l}")));
    }
    let mut x = vec![0.0; deltas.len() * l];
    for (i, &d) in deltas.iter().enumerate() {
        x[i * l + k] = d;
    }
    model.predict(&Tensor::new(vec![deltas.len(), l], x)?)
}

/// `R(k, δ)` on a grid, row-major over `(lags, deltas)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSurface {
    pub lags: Vec<usize>,
    pub deltas: Vec<f64>,
    pub values: Vec<f64>,
}

impl ResponseSurface {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.deltas.len() + j]
    }

    /// Long format `(k, delta, value)`.
    pub fn long(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.lags
            .iter()
            .enumerate()
            .flat_map(move |(i, &k)| self.deltas.iter().enumerate().map(move |(j, &d)| (k, d, self.get(i, j))))
    }
}

pub fn response_surface<F: Forecaster + ?Sized>(model: &F, lags: &[usize], deltas: &[f64]) -> Result<ResponseSurface> {
    let l = model.lookback();
    if let Some(&k) = lags.iter().find(|&&k| k >= l) {
        return Err(Error::OutOfRange(format!("lag {k} outside a window of {l}")));
    }
    let (nk, nd) = (lags.len(), deltas.len());
    let mut x = vec![0.0; nk * nd * l];
    for (i, &k) in lags.iter().enumerate() {
        for (j, &d) in deltas.iter().enumerate() {
            x[(i * nd + j) * l + k] = d;
        }
    }
    let values = model.predict(&Tensor::new(vec![nk * nd, l], x)?)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: "response surface".into(),
        });
    }
    Ok(ResponseSurface {
        lags: lags.to_vec(),
        deltas: deltas.to_vec(),
        values,
    })
}

/// `D = R_A − R_B` with two flatness scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSurface {
    pub lags: Vec<usize>,
    pub deltas: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest residual of a separate least-squares line `a_k + b_k·δ` per
    /// lag. Zero whenever both models respond affinely to every single-lag
    /// shock (linear models, or models that agree up to such a term).
    pub planarity: f64,
    /// Largest residual of one plane `a + b·k + c·δ` over the whole grid.
    pub global_planarity: f64,
}

impl DifferenceSurface {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.deltas.len() + j]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn line_residual(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (y - my - b * (x - mx)).abs())
        .fold(0.0, f64::max)
}

fn plane_residual(lags: &[usize], deltas: &[f64], values: &[f64]) -> f64 {
    // the grid is a full product, so k and δ are orthogonal after centring
    let nk = lags.len() as f64;
    let nd = deltas.len() as f64;
    let mk = lags.iter().map(|&k| k as f64).sum::<f64>() / nk;
    let md = deltas.iter().sum::<f64>() / nd;
    let my = values.iter().sum::<f64>() / values.len() as f64;
    let (mut skk, mut sdd, mut sky, mut sdy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &k) in lags.iter().enumerate() {
        for (j, &d) in deltas.iter().enumerate() {
            let (ck, cd) = (k as f64 - mk, d - md);
            let y = values[i * deltas.len() + j] - my;
            skk += ck * ck;
            sdd += cd * cd;
            sky += ck * y;
            sdy += cd * y;
        }
    }
    let bk = if skk > 0.0 { sky / skk } else { 0.0 };
    let bd = if sdd > 0.0 { sdy / sdd } else { 0.0 };
    let mut worst: f64 = 0.0;
    for (i, &k) in lags.iter().enumerate() {
        for (j, &d) in deltas.iter().enumerate() {
            let fit = my + bk * (k as f64 - mk) + bd * (d - md);
            worst = worst.max((values[i * deltas.len() + j] - fit).abs());
        }
    }
    worst
}

pub fn difference_surface(a: &ResponseSurface, b: &ResponseSurface) -> Result<DifferenceSurface> {
    if a.lags != b.lags || a.deltas != b.deltas || a.values.len() != b.values.len() {
        return Err(Error::GridMismatch(format!(
            "{}×{} vs {}×{} grids, or different grid points",
            a.lags.len(),
            a.deltas.len(),
            b.lags.len(),
            b.deltas.len()
        )));
    }
    let values: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let nd = a.deltas.len();
    let planarity = if nd == 0 {
        0.0
    } else {
        (0..a.lags.len())
            .map(|i| line_residual(&a.deltas, &values[i * nd..(i + 1) * nd]))
            .fold(0.0, f64::max)
    };
    let global_planarity = if values.is_empty() {
        0.0
    } else {
        plane_residual(&a.lags, &a.deltas, &values)
    };
    Ok(DifferenceSurface {
        lags: a.lags.clone(),
        deltas: a.deltas.clone(),
        values,
        planarity,
        global_planarity,
    })
}

/// How orderings are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapleyMode {
    /// `n` uniformly random orderings per row.
    Sampled(usize),
    /// All `L!` orderings (small `L` only).
    Exhaustive,
}

/// Largest window for which [`ShapleyMode::Exhaustive`] is accepted.
pub const MAX_EXHAUSTIVE_LAGS: usize = 8;

/// Per-row Shapley values and their Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowAttribution {
    pub phi: Vec<f64>,
    /// Standard deviation over orderings divided by √(orderings); zero
    /// under exhaustive enumeration.
    pub stderr: Vec<f64>,
    /// `ŷ(x) − ŷ(background)`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    /// Mean |φ_k| over the evaluated rows.
    pub mean_abs_phi: Vec<f64>,
    /// `√(Σ_rows se²)/n_rows` per lag.
    pub stderr: Vec<f64>,
    pub background: Vec<f64>,
    /// Orderings per row.
    pub n_perm: usize,
    pub rows: Vec<RowAttribution>,
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn orderings(l: usize, mode: ShapleyMode, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    match mode {
        ShapleyMode::Sampled(n) => (0..n)
            .map(|_| {
                let mut p: Vec<usize> = (0..l).collect();
                p.shuffle(rng);
                p
            })
            .collect(),
        ShapleyMode::Exhaustive => {
            let mut p: Vec<usize> = (0..l).collect();
            let mut out = vec![p.clone()];
            while next_permutation(&mut p) {
                out.push(p.clone());
            }
            out
        }
    }
}

/// Shapley values of one row: each ordering switches lags from the
/// background to `x` one at a time and credits each lag with the change in
/// output. Contributions telescope, so every ordering satisfies
/// `Σφ = ŷ(x) − ŷ(bg)` on its own.
pub fn shapley_row<F: Forecaster + ?Sized>(
    model: &F,
    x: &[f64],
    background: &[f64],
    mode: ShapleyMode,
    rng: &mut ChaCha8Rng,
) -> Result<RowAttribution> {
    let l = x.len();
    let perms = orderings(l, mode, rng);
    let np = perms.len();
    // one forward pass covers every coalition along every ordering
    let mut inputs = Vec::with_capacity(np * (l + 1) * l);
    for p in &perms {
        let mut z = background.to_vec();
        inputs.extend_from_slice(&z);
        for &j in p {
            z[j] = x[j];
            inputs.extend_from_slice(&z);
        }
    }
    let out = model.predict(&Tensor::new(vec![np * (l + 1), l], inputs)?)?;
    let mut sum = vec![0.0; l];
    let mut sum_sq = vec![0.0; l];
    for (pi, p) in perms.iter().enumerate() {
        let base = pi * (l + 1);
        for (s, &j) in p.iter().enumerate() {
            let c = out[base + s + 1] - out[base + s];
            sum[j] += c;
            sum_sq[j] += c * c;
        }
    }
    let n = np as f64;
    let phi: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr = match mode {
        ShapleyMode::Exhaustive => vec![0.0; l],
        ShapleyMode::Sampled(_) if np > 1 => phi
            .iter()
            .zip(&sum_sq)
            .map(|(m, ss)| ((ss - n * m * m).max(0.0) / (n - 1.0)).sqrt() / n.sqrt())
            .collect(),
        ShapleyMode::Sampled(_) => vec![f64::INFINITY; l],
    };
    Ok(RowAttribution {
        phi,
        stderr,
        gap: out[l] - out[0],
    })
}

/// Attributions for every row of `rows`. Row `i` draws its orderings from
/// ChaCha stream `i` of `seed`, so results do not depend on thread count.
pub fn shapley_attribution<F: Forecaster + ?Sized>(
    model: &F,
    rows: &Tensor,
    background: &[f64],
    mode: ShapleyMode,
    seed: u64,
) -> Result<AttributionReport> {
    let l = model.lookback();
    if rows.ndim() != 2 || rows.cols() != l || background.len() != l {
        return Err(Error::shape(format!(
            "rows {:?} / background {} for a window of {l}",
            rows.shape(),
            background.len()
        )));
    }
    let n_perm = match mode {
        ShapleyMode::Sampled(0) => return Err(Error::Config("n_perm must be ≥ 1".into())),
        ShapleyMode::Sampled(n) => n,
        ShapleyMode::Exhaustive if l > MAX_EXHAUSTIVE_LAGS => {
            return Err(Error::Config(format!(
                "exhaustive Shapley is limited to {MAX_EXHAUSTIVE_LAGS} lags, window has {l}"
            )))
        }
        ShapleyMode::Exhaustive => (1..=l).product(),
    };
    let per_row: Vec<RowAttribution> = (0..rows.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            shapley_row(model, rows.row(i), background, mode, &mut rng)
        })
        .collect::<Result<_>>()?;
    let nr = per_row.len().max(1) as f64;
    let mut mean_abs_phi = vec![0.0; l];
    let mut var = vec![0.0; l];
    for r in &per_row {
        for k in 0..l {
            mean_abs_phi[k] += r.phi[k].abs();
            var[k] += r.stderr[k] * r.stderr[k];
        }
    }
    Ok(AttributionReport {
        mean_abs_phi: mean_abs_phi.iter().map(|v| v / nr).collect(),
        stderr: var.iter().map(|v| v.sqrt() / nr).collect(),
        background: background.to_vec(),
        n_perm,
        rows: per_row,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub member_ids: Vec<String>,
    pub member_mse: Vec<f64>,
    pub member_nmse: Vec<f64>,
    pub ensemble_mse: f64,
    pub ensemble_nmse: f64,
    /// `mean_i mean_t (f_i − f_ens)²` divided by the target variance, so
    /// that `ensemble_nmse = mean(member_nmse) − ambiguity`.
    pub ambiguity: f64,
    /// The same term in raw squared-error units.
    pub ambiguity_mse: f64,
    /// `|ensemble_mse − (mean member MSE − ambiguity_mse)|`, both sides
    /// computed independently.
    pub decomposition_gap: f64,
}

/// Equal-weight ensemble of aligned member predictions.
pub fn ensemble(ids: &[String], preds: &[Vec<f64>], target: &[f64]) -> Result<EnsembleReport> {
    if preds.len() < 2 || ids.len() != preds.len() {
        return Err(Error::Misaligned(format!(
            "{} ids for {} members; need at least two members",
            ids.len(),
            preds.len()
        )));
    }
    let n = target.len();
    if let Some(p) = preds.iter().find(|p| p.len() != n) {
        return Err(Error::Misaligned(format!("member with {} predictions vs {n} targets", p.len())));
    }
    let m = preds.len() as f64;
    let ens: Vec<f64> = (0..n).map(|t| preds.iter().map(|p| p[t]).sum::<f64>() / m).collect();
    let member_mse: Vec<f64> = preds.iter().map(|p| crate::train::mse(p, target)).collect();
    let member_nmse = preds.iter().map(|p| nmse(p, target)).collect::<Result<Vec<_>>>()?;
    let ensemble_mse = crate::train::mse(&ens, target);
    let ensemble_nmse = nmse(&ens, target)?;
    let ambiguity_mse = preds.iter().map(|p| crate::train::mse(p, &ens)).sum::<f64>() / m;
    let tm = target.iter().sum::<f64>() / n as f64;
    let var = target.iter().map(|y| (y - tm) * (y - tm)).sum::<f64>() / n as f64;
    let mean_member = member_mse.iter().sum::<f64>() / m;
    Ok(EnsembleReport {
        member_ids: ids.to_vec(),
        member_mse,
        member_nmse,
        ensemble_mse,
        ensemble_nmse,
        ambiguity: ambiguity_mse / var,
        ambiguity_mse,
        decomposition_gap: (ensemble_mse - (mean_member - ambiguity_mse)).abs(),
    })
}

/// Runs each model on `inputs` and ensembles the predictions.
pub fn ensemble_models(
    ids: &[String],
    members: &[&dyn Forecaster],
    inputs: &Tensor,
    target: &[f64],
) -> Result<EnsembleReport> {
    let preds = members
        .iter()
        .map(|m| m.predict(inputs))
        .collect::<Result<Vec<_>>>()?;
    ensemble(ids, &preds, target)
}
