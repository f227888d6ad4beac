//! Curvature probes: finite-difference Hessian-vector products, power
//! iteration for λ_max, batch sharpness, edge-of-stability entry against
//! `2/η`, the entry-time scaling law, stable-set membership, training
//! traces, and the optimizer-swap intervention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{difference_surface, response_surface, DifferenceSurface, ResponseSurface};
use crate::error::{Error, Result};
use crate::gradengine::flat_grad;
use crate::ingest::Subset;
use crate::models::{ModelConfig, NeuralNet, Parameters};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::tensor::Tensor;
use crate::train::{eval_mse, Trainer};

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `½θᵀAθ − bᵀθ` with symmetric `A` (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Quadratic {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        Self::with_linear(n, a, vec![0.0; n])
    }

    pub fn with_linear(n: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != n * n || b.len() != n {
            return Err(Error::shape(format!("quadratic of size {n} needs {} entries", n * n)));
        }
        Ok(Self { n, a, b })
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut a = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            a[i * n + i] = *v;
        }
        Self { n, a, b: vec![0.0; n] }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.a[i * self.n..(i + 1) * self.n].iter().zip(v).map(|(x, y)| x * y).sum())
            .collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.n
    }

    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let at = self.apply(theta);
        let loss = 0.5 * dot(theta, &at) - dot(&self.b, theta);
        let g = at.iter().zip(&self.b).map(|(x, b)| x - b).collect();
        Ok((loss, g))
    }
}

/// Mean squared error of a network on a fixed batch, as a function of the
/// flattened parameters.
#[derive(Debug, Clone)]
pub struct NeuralObjective<'a> {
    pub model: &'a ModelConfig,
    pub template: &'a Parameters,
    pub inputs: &'a Tensor,
    pub targets: &'a [f64],
}

impl Objective for NeuralObjective<'_> {
    fn dim(&self) -> usize {
        self.template.num_params()
    }

    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        flat_grad(self.model, self.template, theta, self.inputs, self.targets)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `H·v` by central differences of the gradient along `v̂ = v/‖v‖` with
/// step `1e−4·(1 + ‖θ‖)`, rescaled by `‖v‖`.
pub fn hvp<O: Objective + ?Sized>(obj: &O, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let nv = norm(v);
    if !(nv > 0.0) || !nv.is_finite() {
        return Err(Error::Domain("hvp direction must be nonzero and finite".into()));
    }
    let h = 1e-4 * (1.0 + norm(theta));
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t + h * x / nv).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t - h * x / nv).collect();
    let (_, gp) = obj.loss_grad(&plus)?;
    let (_, gm) = obj.loss_grad(&minus)?;
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h) * nv).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric { layer: "hvp".into() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub iters: usize,
    /// Relative change in the Rayleigh quotient that counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    /// Final Rayleigh quotient.
    pub lambda: f64,
    #[serde(skip)]
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

/// Power iteration on the Hessian at `theta`. Starts from `start` when
/// given, otherwise from a seeded Gaussian vector. Stops when successive
/// Rayleigh quotients differ by less than `tol·|λ|`; the estimate found
/// after `iters` iterations is returned flagged unconverged otherwise.
///
/// Power iteration finds the eigenvalue of largest magnitude; on Hessians
/// whose most negative eigenvalue dominates, the result is that one.
pub fn lambda_max<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    cfg: &PowerConfig,
    start: Option<&[f64]>,
) -> Result<PowerResult> {
    if cfg.iters == 0 {
        return Err(Error::Config("power iteration needs iters ≥ 1".into()));
    }
    let n = obj.dim();
    let mut v: Vec<f64> = match start {
        Some(s) if s.len() == n && norm(s) > 0.0 => s.to_vec(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    };
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut history = Vec::new();
    let mut prev: Option<f64> = None;
    for it in 1..=cfg.iters {
        let w = hvp(obj, theta, &v)?;
        let lam = dot(&v, &w);
        history.push(lam);
        let nw = norm(&w);
        let converged = prev.is_some_and(|p| (lam - p).abs() <= cfg.tol * lam.abs());
        if converged || nw == 0.0 {
            return Ok(PowerResult {
                lambda: lam,
                vector: v,
                iterations: it,
                converged: true,
                history,
            });
        }
        prev = Some(lam);
        v = w.iter().map(|x| x / nw).collect();
    }
    Ok(PowerResult {
        lambda: *history.last().unwrap(),
        vector: v,
        iterations: cfg.iters,
        converged: false,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSharpness {
    /// Mean of `gᵀHg/‖g‖²` over the batches that had a nonzero gradient.
    pub value: f64,
    pub per_batch: Vec<f64>,
    pub skipped: usize,
}

/// Expected Rayleigh quotient of each batch's Hessian along that batch's
/// own gradient.
pub fn batch_sharpness<O: Objective>(batches: &[O], theta: &[f64]) -> Result<BatchSharpness> {
    let mut per_batch = Vec::with_capacity(batches.len());
    let mut skipped = 0;
    for b in batches {
        let (_, g) = b.loss_grad(theta)?;
        let gg = dot(&g, &g);
        if gg == 0.0 {
            skipped += 1;
            continue;
        }
        let hg = hvp(b, theta, &g)?;
        per_batch.push(dot(&g, &hg) / gg);
    }
    if per_batch.is_empty() {
        return Err(Error::Domain(format!("all {skipped} batches had zero gradient")));
    }
    Ok(BatchSharpness {
        value: per_batch.iter().sum::<f64>() / per_batch.len() as f64,
        per_batch,
        skipped,
    })
}

/// Index of the first value strictly above `threshold`.
pub fn first_crossing(values: &[f64], threshold: f64) -> Option<usize> {
    values.iter().position(|&v| v > threshold)
}

/// λ_max, batch sharpness and loss sampled along a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureTrace {
    pub steps: Vec<usize>,
    pub lambda_max: Vec<f64>,
    pub batch_sharpness: Vec<f64>,
    pub loss: Vec<f64>,
    /// `2/η`.
    pub threshold: f64,
}

impl CurvatureTrace {
    pub fn new(lr: f64) -> Self {
        Self {
            steps: Vec::new(),
            lambda_max: Vec::new(),
            batch_sharpness: Vec::new(),
            loss: Vec::new(),
            threshold: 2.0 / lr,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: usize, lambda: f64, sharpness: f64, loss: f64) {
        self.steps.push(step);
        self.lambda_max.push(lambda);
        self.batch_sharpness.push(sharpness);
        self.loss.push(loss);
    }

    /// Position of the first λ_max strictly above `2/η`.
    pub fn eos_entry(&self) -> Option<usize> {
        first_crossing(&self.lambda_max, self.threshold)
    }

    /// Training step of [`Self::eos_entry`].
    pub fn entry_step(&self) -> Option<usize> {
        self.eos_entry().map(|i| self.steps[i])
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "lambda_max", "batch_sharpness", "loss", "threshold"])?;
        for i in 0..self.len() {
            w.write_record([
                self.steps[i].to_string(),
                self.lambda_max[i].to_string(),
                self.batch_sharpness[i].to_string(),
                self.loss[i].to_string(),
                self.threshold.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `t* ≈ α·D^β` fitted by least squares on `(ln D, ln t*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub pairs: Vec<(f64, f64)>,
    pub alpha: f64,
    pub beta: f64,
    pub r2: f64,
}

pub fn fit_scaling_law(pairs: &[(f64, f64)]) -> Result<ScalingFit> {
    if pairs.len() < 2 {
        return Err(Error::Domain("scaling fit needs at least two pairs".into()));
    }
    if pairs.iter().any(|&(d, t)| !(d > 0.0 && t > 0.0)) {
        return Err(Error::Domain("scaling pairs must be positive".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("scaling pairs need at least two distinct sizes".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let beta = sxy / sxx;
    let ln_alpha = my - beta * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - ln_alpha - beta * x).powi(2)).sum();
    Ok(ScalingFit {
        pairs: pairs.to_vec(),
        alpha: ln_alpha.exp(),
        beta,
        r2: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 },
    })
}

pub fn extrapolate(fit: &ScalingFit, d: f64) -> f64 {
    (fit.alpha.ln() + fit.beta * d.ln()).exp()
}

/// The four `(dataset size, entry step)` readings reported for the
/// full-size experiment, and the size it was extrapolated to.
pub const REPORTED_ENTRY_PAIRS: [(f64, f64); 4] = [(16384.0, 2500.0), (65536.0, 6000.0), (131072.0, 18000.0), (262144.0, 32000.0)];
pub const REPORTED_TARGET_SIZE: f64 = 2.3e6;
pub const REPORTED_TARGET_ENTRY: f64 = 130_000.0;

/// `λ ≤ 2/η`: on the boundary counts as inside.
pub fn within_stable_set(lambda: f64, lr: f64) -> bool {
    lambda <= 2.0 / lr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableSetResult {
    pub member: bool,
    pub lambda_max: f64,
    pub threshold: f64,
    /// `false` when power iteration did not converge; `member` is then only
    /// the best guess.
    pub determinate: bool,
}

pub fn stable_set_member<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    lr: f64,
    power: &PowerConfig,
) -> Result<StableSetResult> {
    let r = lambda_max(obj, theta, power, None)?;
    Ok(StableSetResult {
        member: within_stable_set(r.lambda, lr),
        lambda_max: r.lambda,
        threshold: 2.0 / lr,
        determinate: r.converged,
    })
}

/// `curvature.*` section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvatureConfig {
    /// Training steps to trace.
    pub steps: usize,
    /// Probe cadence in steps.
    pub every: usize,
    /// Rows of the fixed probe subset used for λ_max during traces.
    pub probe_rows: usize,
    /// Mini-batches averaged per batch-sharpness sample.
    pub sharpness_batches: usize,
    pub power: PowerConfig,
    /// Dataset sizes for `curvature scaling` when measuring entry points.
    pub sizes: Vec<usize>,
    pub swap_step: usize,
    pub continue_steps: usize,
    /// Optimizer the intervention swaps to.
    pub target: Option<OptimizerConfig>,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            every: 50,
            probe_rows: 4096,
            sharpness_batches: 4,
            power: PowerConfig::default(),
            sizes: vec![512, 1024, 2048, 4096],
            swap_step: 500,
            continue_steps: 1500,
            target: None,
        }
    }
}

/// Trains from `init` and samples curvature every `cfg.every` steps (and
/// at the last step). λ_max uses the first `probe_rows` rows of `data`;
/// batch sharpness averages over the next scheduled mini-batches.
pub fn record_trace(
    model: &ModelConfig,
    init: Parameters,
    optim: &OptimizerConfig,
    data: &Subset,
    batch_size: usize,
    seed: u64,
    cfg: &CurvatureConfig,
) -> Result<(CurvatureTrace, Parameters)> {
    if cfg.every == 0 {
        return Err(Error::Config("curvature.every must be ≥ 1".into()));
    }
    let probe = data.head(cfg.probe_rows);
    let mut tr = Trainer::new(model.clone(), init, optim.clone(), data, batch_size, seed)?;
    let mut trace = CurvatureTrace::new(optim.lr);
    let mut warm: Option<Vec<f64>> = None;
    for s in 0..=cfg.steps {
        if s % cfg.every == 0 || s == cfg.steps {
            let theta = tr.params.flatten();
            let pobj = NeuralObjective {
                model,
                template: &tr.params,
                inputs: &probe.inputs,
                targets: &probe.targets,
            };
            let lam = lambda_max(&pobj, &theta, &cfg.power, warm.as_deref())?;
            warm = Some(lam.vector.clone());
            let batches: Vec<Subset> = (0..cfg.sharpness_batches.max(1))
                .map(|j| {
                    let rows = tr.batch_rows(s + j);
                    data.select(&rows)
                })
                .collect();
            let objs: Vec<NeuralObjective> = batches
                .iter()
                .map(|b| NeuralObjective {
                    model,
                    template: &tr.params,
                    inputs: &b.inputs,
                    targets: &b.targets,
                })
                .collect();
            let bs = batch_sharpness(&objs, &theta).map(|b| b.value).unwrap_or(f64::NAN);
            let loss = eval_mse(model, &tr.params, &probe)?;
            trace.push(s, lam.lambda, bs, loss);
        }
        if s < cfg.steps {
            tr.step_once()?;
        }
    }
    Ok((trace, tr.params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub source: OptimizerKind,
    pub target: OptimizerKind,
    pub swap_step: usize,
    pub continue_steps: usize,
    /// Response surface at the swap (source optimizer's weights).
    pub pre_surface: ResponseSurface,
    /// After `continue_steps` of the target optimizer.
    pub post_surface: ResponseSurface,
    /// Target optimizer from the same initialisation for the same total steps.
    pub baseline_surface: ResponseSurface,
    /// `post − baseline`.
    pub difference: DifferenceSurface,
    pub lambda_pre: f64,
    pub lambda_post: f64,
    pub lambda_baseline: f64,
    pub loss_post: f64,
    pub loss_baseline: f64,
    /// `‖θ_post − θ_baseline‖₂`.
    pub param_distance: f64,
    #[serde(skip)]
    pub swap_params: Option<Parameters>,
    #[serde(skip)]
    pub post_params: Option<Parameters>,
}

/// Everything an intervention needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub model: ModelConfig,
    pub source: OptimizerConfig,
    pub target: OptimizerConfig,
    pub swap_step: usize,
    pub continue_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lags: Vec<usize>,
    pub deltas: Vec<f64>,
    pub probe_rows: usize,
    pub power: PowerConfig,
}

/// Source optimizer from `init` for `swap_step` steps, hard reset, then the
/// target optimizer for `continue_steps`. The source trajectory is
/// recomputed from `init` (the batch schedule is deterministic, so this is
/// the same as loading a checkpoint taken at `swap_step`). The baseline is
/// the target optimizer from `init` for `swap_step + continue_steps` steps
/// on the same schedule.
pub fn run_intervention(spec: &InterventionSpec, init: &Parameters, data: &Subset) -> Result<InterventionReport> {
    let (m, bs, seed) = (&spec.model, spec.batch_size, spec.seed);
    let mut tr = Trainer::new(m.clone(), init.clone(), spec.source.clone(), data, bs, seed)?;
    for _ in 0..spec.swap_step {
        tr.step_once()?;
    }
    let swap_params = tr.params.clone();
    tr.swap_optimizer(spec.target.clone())?;
    for _ in 0..spec.continue_steps {
        tr.step_once()?;
    }
    let post = tr.params;

    let mut base = Trainer::new(m.clone(), init.clone(), spec.target.clone(), data, bs, seed)?;
    for _ in 0..spec.swap_step + spec.continue_steps {
        base.step_once()?;
    }
    let baseline = base.params;

    let probe = data.head(spec.probe_rows);
    let lam = |p: &Parameters| -> Result<f64> {
        let obj = NeuralObjective {
            model: m,
            template: p,
            inputs: &probe.inputs,
            targets: &probe.targets,
        };
        Ok(lambda_max(&obj, &p.flatten(), &spec.power, None)?.lambda)
    };
    let surf = |p: &Parameters| response_surface(&NeuralNet::new(m.clone(), p.clone()), &spec.lags, &spec.deltas);
    let pre_surface = surf(&swap_params)?;
    let post_surface = surf(&post)?;
    let baseline_surface = surf(&baseline)?;
    let difference = difference_surface(&post_surface, &baseline_surface)?;
    let dist = post
        .flatten()
        .iter()
        .zip(baseline.flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(InterventionReport {
        source: spec.source.kind,
        target: spec.target.kind,
        swap_step: spec.swap_step,
        continue_steps: spec.continue_steps,
        pre_surface,
        post_surface,
        baseline_surface,
        difference,
        lambda_pre: lam(&swap_params)?,
        lambda_post: lam(&post)?,
        lambda_baseline: lam(&baseline)?,
        loss_post: eval_mse(m, &post, &probe)?,
        loss_baseline: eval_mse(m, &baseline, &probe)?,
        param_distance: dist,
        swap_params: Some(swap_params),
        post_params: Some(post),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_semantics() {
        assert_eq!(first_crossing(&[1.0, 2.0, 3.0], 2.5), Some(2));
        assert_eq!(first_crossing(&[1.0, 2.0], 2.5), None);
        assert_eq!(first_crossing(&[2.5, 2.5], 2.5), None);
    }

    #[test]
    fn stable_set_boundary() {
        assert!(within_stable_set(1.0, 1.0));
        assert!(!within_stable_set(1.0, 3.0));
        assert!(within_stable_set(4.0, 0.5));
    }

    #[test]
    fn identity_converges_immediately() {
        let q = Quadratic::diag(&[1.0; 6]);
        let r = lambda_max(&q, &[0.3; 6], &PowerConfig::default(), None).unwrap();
        assert!((r.lambda - 1.0).abs() < 1e-8);
        assert!(r.converged);
        assert!(r.iterations <= 2);
    }

    #[test]
    fn scaling_two_points_interpolate() {
        let f = fit_scaling_law(&[(10.0, 3.0), (1000.0, 30.0)]).unwrap();
        assert!((extrapolate(&f, 10.0) - 3.0).abs() < 1e-12);
        assert!((extrapolate(&f, 1000.0) - 30.0).abs() < 1e-10);
        assert!(matches!(fit_scaling_law(&[(1.0, 0.0), (2.0, 1.0)]), Err(Error::Domain(_))));
    }
}
