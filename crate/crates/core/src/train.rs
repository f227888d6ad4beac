//! Training loop, early stopping, NMSE, random-search sweeps, refits and
//! multi-seed aggregation.
//!
//! The mini-batch schedule is a pure function of `(seed, global step)`:
//! epoch `e` visits the training rows in the order of a ChaCha permutation
//! drawn from stream `e + 1` of the run seed, and the final short batch of an
//! epoch is kept. This is what makes optimizer swaps in the middle of a run
//! line up exactly with an uninterrupted run.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradengine::grad;
use crate::ingest::{Split, Subset, WindowedDataset};
use crate::models::{init, predict, ModelConfig, Parameters};
use crate::optim::{hard_reset, step, OptimizerConfig, OptimizerKind, OptimizerState, LR_RANGE};

/// `train.*` section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Seeds weight initialisation and the batch schedule.
    pub seed: u64,
    /// Random-search trials per sweep. 0 skips the sweep and uses `optim.lr`
    /// and `optim.weight_decay` as given.
    pub n_trials: usize,
    /// Seeds per grid cell.
    pub n_seeds: usize,
    /// Retrain on train ∪ val for the best epoch count before testing.
    pub refit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            n_trials: 25,
            n_seeds: 13,
            refit: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be ≥ 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
}

/// Population-variance-normalised MSE. 1 is the mean predictor.
pub fn nmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Misaligned(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if target.len() < 2 {
        return Err(Error::UndefinedNmse("need at least two targets".into()));
    }
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let var = target.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::UndefinedNmse("target variance is zero".into()));
    }
    Ok(mse(pred, target) / var)
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / target.len() as f64
}

/// MSE of a model on a subset.
pub fn eval_mse(cfg: &ModelConfig, params: &Parameters, data: &Subset) -> Result<f64> {
    let p = predict(cfg, params, &data.inputs)?;
    Ok(mse(&p, &data.targets))
}

/// Row order for one epoch.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if batch_size < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        idx.shuffle(&mut rng);
    }
    idx
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Step-level driver: owns parameters and optimizer state, and pulls
/// batches from the deterministic schedule.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub params: Parameters,
    pub state: OptimizerState,
    pub optim: OptimizerConfig,
    data: &'a Subset,
    batch_size: usize,
    seed: u64,
    /// Global step count (batches processed).
    pub step: usize,
    order: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ModelConfig,
        params: Parameters,
        optim: OptimizerConfig,
        data: &'a Subset,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        optim.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyPanel("no training rows".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        let state = OptimizerState::new(optim.kind, &params, 0);
        Ok(Self {
            model,
            params,
            state,
            optim,
            data,
            batch_size,
            seed,
            step: 0,
            order: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        batches_per_epoch(self.data.len(), self.batch_size)
    }

    /// Row indices of the batch at global step `s`.
    pub fn batch_rows(&mut self, s: usize) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, b) = (s / bpe, s % bpe);
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.order = Some((epoch, epoch_order(self.data.len(), self.batch_size, self.seed, epoch)));
        }
        let order = &self.order.as_ref().unwrap().1;
        let end = ((b + 1) * self.batch_size).min(order.len());
        order[b * self.batch_size..end].to_vec()
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step_once(&mut self) -> Result<f64> {
        let rows = self.batch_rows(self.step);
        let (loss, g) = if rows.len() == self.data.len() && rows.iter().enumerate().all(|(i, &r)| i == r) {
            grad(&self.model, &self.params, &self.data.inputs, &self.data.targets)?
        } else {
            let b = self.data.select(&rows);
            grad(&self.model, &self.params, &b.inputs, &b.targets)?
        };
        step(&mut self.params, &g, &mut self.state, &self.optim)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs one epoch from the current position to the next epoch boundary
    /// and returns the row-weighted mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let bpe = self.batches_per_epoch();
        let mut acc = 0.0;
        loop {
            let rows = self.batch_rows(self.step).len();
            let l = self.step_once()?;
            if !l.is_finite() {
                return Err(Error::Numeric { layer: "loss".into() });
            }
            acc += l * rows as f64;
            if self.step % bpe == 0 {
                break;
            }
        }
        Ok(acc / self.data.len() as f64)
    }

    /// Replaces the optimizer with a zeroed `target`, keeping the weights and
    /// the batch schedule position.
    pub fn swap_optimizer(&mut self, target: OptimizerConfig) -> Result<()> {
        target.validate()?;
        let (p, s) = hard_reset(target.kind, &self.params, self.step);
        self.params = p;
        self.state = s;
        self.optim = target;
        Ok(())
    }
}

/// Early-stopping bookkeeping: a new best needs a strict improvement; stop
/// once `patience` epochs have passed without one.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_epoch: usize,
    pub best: f64,
    epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: 0,
            best: f64::INFINITY,
            epochs: 0,
        }
    }

    /// Records the next epoch's validation loss. Returns whether it is a new
    /// best.
    pub fn record(&mut self, val: f64) -> bool {
        self.epochs += 1;
        if val < self.best {
            self.best = val;
            self.best_epoch = self.epochs;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs - self.best_epoch >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: crate::models::Arch,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Row-weighted mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation MSE per epoch (empty for refits).
    pub val_loss: Vec<f64>,
    /// 1-based; 0 if no epoch completed.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub steps: usize,
    pub test_nmse: Option<f64>,
    pub diverged: bool,
    /// Parameters at the best epoch (final epoch for refits).
    #[serde(skip)]
    pub params: Option<Parameters>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    fn empty(spec: &RunSpec) -> Self {
        Self {
            arch: spec.model.arch,
            optimizer: spec.optim.kind,
            lr: spec.optim.lr,
            weight_decay: spec.optim.weight_decay,
            seed: spec.train.seed,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            epochs_run: 0,
            steps: 0,
            test_nmse: None,
            diverged: false,
            params: None,
            wall_clock_secs: 0.0,
        }
    }
}

fn diverged_on(e: &Error) -> bool {
    matches!(e, Error::Numeric { .. })
}

/// Trains on the train split with validation early stopping and scores the
/// best-epoch parameters on the test split.
pub fn train_one(data: &WindowedDataset, spec: &RunSpec) -> Result<TrainReport> {
    let train = data.train();
    let val = data.val();
    let test = data.test();
    train_on(&train, Some(&val), Some(&test), spec, None)
}

/// Core loop. With `fixed_epochs`, runs exactly that many epochs without
/// validation; otherwise early-stops on `val`.
pub fn train_on(
    train: &Subset,
    val: Option<&Subset>,
    test: Option<&Subset>,
    spec: &RunSpec,
    fixed_epochs: Option<usize>,
) -> Result<TrainReport> {
    spec.train.validate()?;
    let t0 = Instant::now();
    let mut report = TrainReport::empty(spec);
    if fixed_epochs.is_none() && val.is_none_or(Subset::is_empty) {
        return Err(Error::EmptyPanel("training needs a nonempty validation split".into()));
    }
    let params = init(&spec.model, spec.train.seed)?;
    let mut tr = Trainer::new(
        spec.model.clone(),
        params,
        spec.optim.clone(),
        train,
        spec.train.batch_size,
        spec.train.seed,
    )?;
    let epochs = fixed_epochs.unwrap_or(spec.train.max_epochs);
    let mut stopper = EarlyStopper::new(spec.train.patience);
    let mut best = None;
    for _ in 0..epochs {
        let loss = match tr.run_epoch() {
            Ok(l) => l,
            Err(e) if diverged_on(&e) => {
                report.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        report.train_loss.push(loss);
        report.epochs_run += 1;
        match (fixed_epochs, val) {
            (None, Some(v)) => {
                let vl = match eval_mse(&tr.model, &tr.params, v) {
                    Ok(x) if x.is_finite() => x,
                    Ok(_) => {
                        report.diverged = true;
                        break;
                    }
                    Err(e) if diverged_on(&e) => {
                        report.diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                report.val_loss.push(vl);
                if stopper.record(vl) {
                    best = Some(tr.params.clone());
                }
                if stopper.should_stop() {
                    break;
                }
            }
            _ => best = Some(tr.params.clone()),
        }
    }
    report.steps = tr.step;
    if fixed_epochs.is_some() {
        report.best_epoch = report.epochs_run;
        report.best_val_loss = f64::NAN;
    } else {
        report.best_epoch = stopper.best_epoch;
        report.best_val_loss = stopper.best;
    }
    if let (Some(p), Some(t)) = (&best, test) {
        if !report.diverged || fixed_epochs.is_none() {
            let pred = predict(&spec.model, p, &t.inputs)?;
            report.test_nmse = Some(nmse(&pred, &t.targets)?);
        }
    }
    report.params = best;
    report.wall_clock_secs = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Retrains from the same initialisation on train ∪ val for exactly
/// `epochs` epochs and scores the result on test.
pub fn refit_final(data: &WindowedDataset, spec: &RunSpec, epochs: usize) -> Result<TrainReport> {
    if epochs == 0 {
        return Err(Error::Config("refit needs a positive epoch count".into()));
    }
    let tv = data.subset(&[Split::Train, Split::Val]);
    let test = data.test();
    train_on(&tv, None, Some(&test), spec, Some(epochs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub lr: f64,
    pub weight_decay: f64,
    /// Best validation loss; `None` when the trial diverged or failed.
    pub val_loss: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub optimizer: OptimizerKind,
    pub lr_range: (f64, f64),
    pub wd_range: (f64, f64),
    pub trials: Vec<Trial>,
    /// Index into `trials`.
    pub winner: usize,
}

impl SweepResult {
    pub fn best(&self) -> &Trial {
        &self.trials[self.winner]
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// The `(lr, wd)` pairs a sweep would try.
pub fn sample_trials(kind: OptimizerKind, n_trials: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_trials)
        .map(|_| {
            let lr = log_uniform(&mut rng, LR_RANGE);
            let wd = log_uniform(&mut rng, kind.wd_range());
            (lr, wd)
        })
        .collect()
}

/// Random search with an arbitrary objective returning
/// `(val_loss, best_epoch)`. Non-finite or failed trials are ignored when
/// picking the winner; ties go to the lower learning rate.
pub fn sweep_with<F>(kind: OptimizerKind, n_trials: usize, seed: u64, objective: F) -> Result<SweepResult>
where
    F: Fn(f64, f64) -> Result<(f64, usize)> + Sync,
{
    if n_trials == 0 {
        return Err(Error::Config("sweep needs at least one trial".into()));
    }
    let trials: Vec<Trial> = sample_trials(kind, n_trials, seed)
        .into_par_iter()
        .map(|(lr, wd)| {
            let (val_loss, best_epoch) = match objective(lr, wd) {
                Ok((v, e)) if v.is_finite() => (Some(v), e),
                _ => (None, 0),
            };
            Trial {
                lr,
                weight_decay: wd,
                val_loss,
                best_epoch,
            }
        })
        .collect();
    let winner = trials
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.val_loss.map(|v| (i, v, t.lr)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)))
        .map(|(i, _, _)| i)
        .ok_or(Error::SweepFailure(n_trials))?;
    Ok(SweepResult {
        optimizer: kind,
        lr_range: LR_RANGE,
        wd_range: kind.wd_range(),
        trials,
        winner,
    })
}

/// Random search over `(lr, wd)` for `spec.optim.kind`, each trial a
/// [`train_one`] with `spec.train.seed`.
pub fn sweep(data: &WindowedDataset, spec: &RunSpec, n_trials: usize, seed: u64) -> Result<SweepResult> {
    let train = data.train();
    let val = data.val();
    sweep_with(spec.optim.kind, n_trials, seed, |lr, wd| {
        let mut s = spec.clone();
        s.optim.lr = lr;
        s.optim.weight_decay = wd;
        let r = train_on(&train, Some(&val), None, &s, None)?;
        if r.diverged && r.best_epoch == 0 {
            return Err(Error::Numeric { layer: "loss".into() });
        }
        Ok((r.best_val_loss, r.best_epoch))
    })
}

/// One seed of a grid cell: early-stopped training, then (optionally) the
/// train ∪ val refit for the best epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train: TrainReport,
    pub refit: Option<TrainReport>,
    pub test_nmse: f64,
}

pub fn run_seed(data: &WindowedDataset, spec: &RunSpec, seed: u64) -> Result<SeedRun> {
    let mut s = spec.clone();
    s.train.seed = seed;
    let train = train_one(data, &s)?;
    if train.best_epoch == 0 {
        return Err(Error::Numeric {
            layer: format!("seed {seed}: diverged before the first epoch finished"),
        });
    }
    let refit = if spec.train.refit {
        Some(refit_final(data, &s, train.best_epoch)?)
    } else {
        None
    };
    let test_nmse = refit
        .as_ref()
        .and_then(|r| r.test_nmse)
        .or(train.test_nmse)
        .ok_or_else(|| Error::Numeric {
            layer: format!("seed {seed}: no test score"),
        })?;
    if !test_nmse.is_finite() {
        return Err(Error::Numeric {
            layer: format!("seed {seed}: non-finite test NMSE"),
        });
    }
    Ok(SeedRun {
        seed,
        train,
        refit,
        test_nmse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeed {
    pub mean_nmse: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub std_nmse: f64,
    /// Sorted by seed.
    pub runs: Vec<SeedRun>,
}

pub fn aggregate(mut runs: Vec<SeedRun>) -> MultiSeed {
    runs.sort_by_key(|r| r.seed);
    let v: Vec<f64> = runs.iter().map(|r| r.test_nmse).collect();
    let (mean, std) = mean_std(&v);
    MultiSeed {
        mean_nmse: mean,
        std_nmse: std,
        runs,
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// The default seed list `0..n`.
pub fn default_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// Runs every seed (in parallel) and aggregates.
pub fn multi_seed(data: &WindowedDataset, spec: &RunSpec, seeds: &[u64]) -> Result<MultiSeed> {
    if seeds.is_empty() {
        return Err(Error::Config("multi_seed needs at least one seed".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&s| run_seed(data, spec, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(runs))
}
