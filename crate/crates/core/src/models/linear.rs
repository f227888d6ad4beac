//! OLS and LASSO baselines on the lag vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Forecaster;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The LASSO penalty grid searched for the baseline.
pub const LASSO_ALPHAS: [f64; 6] = [0.001, 0.01, 0.025, 0.05, 0.1, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKind {
    Ols,
    Lasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: LinearKind,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Penalty (0 for OLS).
    pub alpha: f64,
    /// Set when OLS had to fall back to the pseudo-inverse.
    pub rank_deficient: bool,
}

impl LinearModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut acc = self.intercept;
        for (w, v) in self.weights.iter().zip(x) {
            acc += w * v;
        }
        acc
    }
}

impl Forecaster for LinearModel {
    fn lookback(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        if inputs.ndim() != 2 || inputs.cols() != self.weights.len() {
            return Err(Error::shape(format!(
                "inputs {:?} for a {}-weight linear model",
                inputs.shape(),
                self.weights.len()
            )));
        }
        Ok((0..inputs.rows())
            .map(|i| self.predict_row(inputs.row(i)))
            .collect())
    }
}

struct Centered {
    x: Vec<f64>, // row-major (n, p), column-centred
    y: Vec<f64>,
    x_mean: Vec<f64>,
    y_mean: f64,
    n: usize,
    p: usize,
}

fn center(x: &Tensor, y: &[f64]) -> Result<Centered> {
    if x.ndim() != 2 || x.rows() != y.len() {
        return Err(Error::shape(format!(
            "design {:?} vs {} targets",
            x.shape(),
            y.len()
        )));
    }
    let (n, p) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::shape("empty design matrix"));
    }
    let mut x_mean = vec![0.0; p];
    for i in 0..n {
        for (m, v) in x_mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    x_mean.iter_mut().for_each(|m| *m /= n as f64);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut xc = Vec::with_capacity(n * p);
    for i in 0..n {
        xc.extend(x.row(i).iter().zip(&x_mean).map(|(v, m)| v - m));
    }
    Ok(Centered {
        x: xc,
        y: y.iter().map(|v| v - y_mean).collect(),
        x_mean,
        y_mean,
        n,
        p,
    })
}

/// In-place Cholesky of a symmetric `(p, p)` matrix; `None` when a pivot is
/// not safely positive.
fn cholesky(mut a: Vec<f64>, p: usize) -> Option<Vec<f64>> {
    let max_diag = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if d <= floor {
            return None;
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    Some(a)
}

fn cholesky_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            z[i] -= l[i * p + k] * z[k];
        }
        z[i] /= l[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            z[i] -= l[k * p + i] * z[k];
        }
        z[i] /= l[i * p + i];
    }
    z
}

/// Least squares with an explicit intercept via the normal equations of the
/// centred design. Rank-deficient (or `n ≤ p`) designs are solved through the
/// SVD pseudo-inverse instead and flagged.
pub fn ols_fit(x: &Tensor, y: &[f64]) -> Result<LinearModel> {
    let c = center(x, y)?;
    let (n, p) = (c.n, c.p);
    let mut gram = vec![0.0; p * p];
    crate::tensor::gemm_acc(p, n, p, &c.x, true, &c.x, false, &mut gram);
    let mut xty = vec![0.0; p];
    for i in 0..n {
        let yi = c.y[i];
        for (acc, v) in xty.iter_mut().zip(&c.x[i * p..(i + 1) * p]) {
            *acc += v * yi;
        }
    }
    let chol = if n > p { cholesky(gram.clone(), p) } else { None };
    let (weights, rank_deficient) = match chol {
        Some(l) => (cholesky_solve(&l, p, &xty), false),
        None => (pinv_solve(gram, p, &xty), true),
    };
    let intercept = c.y_mean - weights.iter().zip(&c.x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearModel {
        kind: LinearKind::Ols,
        weights,
        intercept,
        alpha: 0.0,
        rank_deficient,
    })
}

/// Minimum-norm solution of `G w = b` for a symmetric PSD Gram matrix,
/// discarding eigen-directions below a relative cutoff.
fn pinv_solve(gram: Vec<f64>, p: usize, b: &[f64]) -> Vec<f64> {
    let eig = DMatrix::from_row_slice(p, p, &gram).symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = 1e-12 * top.max(f64::MIN_POSITIVE);
    let bv = DVector::from_column_slice(b);
    let mut w = DVector::zeros(p);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let v = eig.eigenvectors.column(k);
            w += v * (v.dot(&bv) / lam);
        }
    }
    w.iter().copied().collect()
}

/// Knobs for the coordinate-descent solver.
#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    pub max_sweeps: usize,
    /// Required KKT residual at exit.
    pub kkt_tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200_000,
            kkt_tol: 1e-6,
        }
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    // a few ulps of slack so that α equal to the kill threshold, computed in
    // a different summation order, still zeroes the coordinate
    let t = t * (1.0 + 8.0 * f64::EPSILON);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Largest violation of the LASSO optimality conditions at `w` given the
/// centred residual `r = y − Xw`.
fn kkt_gap(c: &Centered, w: &[f64], r: &[f64], alpha: f64) -> f64 {
    let (n, p) = (c.n, c.p);
    let mut g = vec![0.0; p];
    for i in 0..n {
        for (gj, v) in g.iter_mut().zip(&c.x[i * p..(i + 1) * p]) {
            *gj += v * r[i];
        }
    }
    g.iter()
        .zip(w)
        .map(|(gj, wj)| {
            let gj = gj / n as f64;
            if *wj != 0.0 {
                (gj - alpha * wj.signum()).abs()
            } else {
                (gj.abs() - alpha).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Coordinate descent for `(1/2n)‖y − Xw − b‖² + α‖w‖₁` with an unpenalised
/// intercept.
pub fn lasso_fit(x: &Tensor, y: &[f64], alpha: f64) -> Result<LinearModel> {
    lasso_fit_with(x, y, alpha, LassoOptions::default())
}

pub fn lasso_fit_with(x: &Tensor, y: &[f64], alpha: f64, opts: LassoOptions) -> Result<LinearModel> {
    if !(alpha >= 0.0) {
        return Err(Error::Domain(format!("lasso alpha {alpha} must be ≥ 0")));
    }
    let c = center(x, y)?;
    let (n, p) = (c.n, c.p);
    let nf = n as f64;
    // column-major copy for cache-friendly coordinate updates
    let mut cols = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            cols[j * n + i] = c.x[i * p + j];
        }
    }
    let col_sq: Vec<f64> = (0..p)
        .map(|j| cols[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>() / nf)
        .collect();
    let mut w = vec![0.0; p];
    let mut r = c.y.clone();
    let mut done = false;
    for sweep in 0..opts.max_sweeps {
        let mut max_delta: f64 = 0.0;
        let mut max_w: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = &cols[j * n..(j + 1) * n];
            let rho = col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + col_sq[j] * w[j];
            let new = soft_threshold(rho, alpha) / col_sq[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for (ri, a) in r.iter_mut().zip(col) {
                    *ri -= delta * a;
                }
                w[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
            max_w = max_w.max(new.abs());
        }
        let settled = max_delta <= 1e-13 * max_w.max(1.0);
        if settled || sweep % 50 == 49 {
            let gap = kkt_gap(&c, &w, &r, alpha);
            if gap <= 1e-2 * opts.kkt_tol || (settled && gap <= opts.kkt_tol) {
                done = true;
                break;
            }
        }
    }
    if !done {
        let gap = kkt_gap(&c, &w, &r, alpha);
        if gap > opts.kkt_tol {
            return Err(Error::Convergence {
                iterations: opts.max_sweeps,
                kkt_gap: gap,
            });
        }
    }
    let intercept = c.y_mean - w.iter().zip(&c.x_mean).map(|(a, m)| a * m).sum::<f64>();
    Ok(LinearModel {
        kind: LinearKind::Lasso,
        weights: w,
        intercept,
        alpha,
        rank_deficient: false,
    })
}

/// Outcome of the validation search over LASSO penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSelection {
    pub model: LinearModel,
    /// `(alpha, validation MSE)` per grid point, in grid order.
    pub val_losses: Vec<(f64, f64)>,
}

fn mse(model: &LinearModel, x: &Tensor, y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, yi) in y.iter().enumerate() {
        let e = model.predict_row(x.row(i)) - yi;
        acc += e * e;
    }
    acc / y.len() as f64
}

fn vstack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("train/val column mismatch"));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Pick the penalty with the lowest validation MSE (ties go to the larger,
/// sparser penalty), then refit on train ∪ val at that penalty.
pub fn lasso_select(
    x_train: &Tensor,
    y_train: &[f64],
    x_val: &Tensor,
    y_val: &[f64],
    alphas: &[f64],
) -> Result<LassoSelection> {
    if alphas.is_empty() {
        return Err(Error::Config("empty LASSO alpha grid".into()));
    }
    let mut val_losses = Vec::with_capacity(alphas.len());
    let mut best: Option<(f64, f64)> = None;
    for &a in alphas {
        let m = lasso_fit(x_train, y_train, a)?;
        let loss = mse(&m, x_val, y_val);
        val_losses.push((a, loss));
        best = match best {
            Some((ba, bl)) if loss > bl || (loss == bl && a < ba) => Some((ba, bl)),
            _ => Some((a, loss)),
        };
    }
    let (alpha, _) = best.unwrap();
    let x_all = vstack(x_train, x_val)?;
    let mut y_all = y_train.to_vec();
    y_all.extend_from_slice(y_val);
    let model = lasso_fit(&x_all, &y_all, alpha)?;
    Ok(LassoSelection { model, val_losses })
}
