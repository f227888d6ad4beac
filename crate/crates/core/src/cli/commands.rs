use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use super::{model_path, Command, CurvatureCmd, Ctx, DiagnoseCmd, Outcome, PortfolioArgs};
use crate::curvature::{
    extrapolate, fit_scaling_law, record_trace, run_intervention, InterventionSpec, REPORTED_ENTRY_PAIRS,
    REPORTED_TARGET_ENTRY,
};
use crate::diagnostics::{
    difference_surface, impulse_response, response_surface, shapley_attribution, ensemble_models, ResponseSurface,
    ShapleyMode,
};
use crate::error::{Error, Result};
use crate::ingest::{load_panel, prepare, prepare_panel, synth_panel, AssetId, Prepared, Split};
use crate::models::{
    init, lasso_select, ols_fit, Arch, Checkpoint, Forecaster, LinearModel, NeuralNet, LASSO_ALPHAS,
};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::portfolio::{frontier, perf_summary, portfolio_returns, rolling_mean, ForecastPanel};
use crate::train::{multi_seed, nmse, run_seed, sweep, RunSpec, SeedRun};

pub(super) fn dispatch(cmd: &Command, ctx: &mut Ctx) -> Result<Outcome> {
    match cmd {
        Command::Synth => synth(ctx),
        Command::Ingest { input } => ingest(ctx, input.as_deref()),
        Command::Train => train(ctx),
        Command::Sweep => sweep_cmd(ctx),
        Command::Grid => grid(ctx),
        Command::Diagnose(d) => diagnose(ctx, d),
        Command::Curvature(CurvatureCmd::Trace) => curvature_trace(ctx),
        Command::Curvature(CurvatureCmd::Scaling {
            pairs,
            reported,
            target,
        }) => curvature_scaling(ctx, pairs.as_deref(), *reported, *target),
        Command::Intervene => intervene(ctx),
        Command::Ensemble { models } => ensemble_cmd(ctx, models),
        Command::Portfolio(p) => portfolio_cmd(ctx, p),
    }
}

fn prepared(ctx: &Ctx, input: Option<&Path>) -> Result<Prepared> {
    let p = match input {
        Some(path) => {
            let loaded = load_panel(path, &ctx.cfg.ingest.columns)?;
            prepare_panel(loaded.panel, loaded.dropped, &ctx.cfg.ingest)?
        }
        None => prepare(&ctx.cfg.ingest, ctx.seed)?,
    };
    info!(
        "dataset: {} windows ({} train / {} val / {} test)",
        p.dataset.len(),
        p.dataset.count(Split::Train),
        p.dataset.count(Split::Val),
        p.dataset.count(Split::Test)
    );
    Ok(p)
}

fn load_net(path: &Path) -> Result<NeuralNet> {
    Ok(Checkpoint::load(path)?.net())
}

fn check_lookback(net: &dyn Forecaster, l: usize) -> Result<()> {
    if net.lookback() != l {
        return Err(Error::Config(format!(
            "checkpoint has a window of {} but ingest.lookback is {l}",
            net.lookback()
        )));
    }
    Ok(())
}

fn save_ckpt(ctx: &mut Ctx, name: &str, net: &NeuralNet, step: usize) -> Result<()> {
    let p = ctx.path(name);
    Checkpoint::new(net, step).save(&p)
}

fn write_surface(ctx: &mut Ctx, name: &str, s: &ResponseSurface) -> Result<()> {
    let mut w = ctx.writer(name)?;
    w.write_record(["k", "delta", "value"])?;
    for (k, d, v) in s.long() {
        w.write_record([k.to_string(), d.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(name, e))
}

fn synth(ctx: &mut Ctx) -> Result<Outcome> {
    let c = &ctx.cfg.ingest;
    let panel = synth_panel(c.n_assets, c.n_days, &c.vol, ctx.seed)?;
    panel.write_csv(&ctx.path("panel.csv"))?;
    #[derive(Serialize)]
    struct Summary {
        assets: usize,
        days: usize,
        bars: usize,
    }
    ctx.write_json(
        "synth.json",
        &Summary {
            assets: panel.assets.len(),
            days: panel.calendar.len(),
            bars: panel.n_bars(),
        },
    )?;
    Ok(Outcome::Ok)
}

fn ingest(ctx: &mut Ctx, input: Option<&Path>) -> Result<Outcome> {
    let p = prepared(ctx, input)?;
    ctx.path("dataset.bin");
    ctx.path("dataset.json");
    p.dataset.save(&ctx.dir, "dataset")?;
    #[derive(Serialize)]
    struct Summary<'a> {
        assets: usize,
        calendar_days: usize,
        dropped_rows: usize,
        report: &'a crate::ingest::WindowReport,
        train_rows: usize,
        val_rows: usize,
        test_rows: usize,
    }
    ctx.write_json(
        "ingest.json",
        &Summary {
            assets: p.panel.assets.len(),
            calendar_days: p.panel.calendar.len(),
            dropped_rows: p.dropped_rows,
            report: &p.report,
            train_rows: p.dataset.count(Split::Train),
            val_rows: p.dataset.count(Split::Val),
            test_rows: p.dataset.count(Split::Test),
        },
    )?;
    Ok(Outcome::Ok)
}

fn train(ctx: &mut Ctx) -> Result<Outcome> {
    let p = prepared(ctx, None)?;
    let spec = ctx.cfg.run_spec();
    let run = run_seed(&p.dataset, &spec, ctx.seed)?;
    let mut w = ctx.writer("curves.csv")?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for (i, tl) in run.train.train_loss.iter().enumerate() {
        let vl = run.train.val_loss.get(i).map_or(String::new(), f64::to_string);
        w.write_record([(i + 1).to_string(), tl.to_string(), vl])?;
    }
    w.flush().map_err(|e| Error::io("curves.csv", e))?;
    let (params, steps) = match &run.refit {
        Some(r) => (r.params.clone(), r.steps),
        None => (run.train.params.clone(), run.train.steps),
    };
    if let Some(params) = params {
        save_ckpt(ctx, "model.ckpt", &NeuralNet::new(spec.model.clone(), params), steps)?;
    }
    ctx.write_json("report.json", &run)?;
    info!("test NMSE {:.6}", run.test_nmse);
    Ok(if run.train.diverged { Outcome::Diverged } else { Outcome::Ok })
}

fn sweep_cmd(ctx: &mut Ctx) -> Result<Outcome> {
    let p = prepared(ctx, None)?;
    let spec = ctx.cfg.run_spec();
    let res = sweep(&p.dataset, &spec, ctx.cfg.train.n_trials, ctx.seed)?;
    let mut w = ctx.writer("trials.csv")?;
    w.write_record(["lr", "weight_decay", "val_loss", "best_epoch"])?;
    for t in &res.trials {
        w.write_record([
            t.lr.to_string(),
            t.weight_decay.to_string(),
            t.val_loss.map_or("diverged".into(), |v| v.to_string()),
            t.best_epoch.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("trials.csv", e))?;
    ctx.write_json("sweep.json", &res)?;
    Ok(Outcome::Ok)
}

/// One row of the results table.
#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub model: String,
    pub optimizer: String,
    pub status: String,
    pub error: Option<String>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub mean_nmse: Option<f64>,
    pub std_nmse: Option<f64>,
    pub seeds: Vec<(u64, f64)>,
    #[serde(skip)]
    pub runs: Vec<SeedRun>,
}

fn grid_cell(p: &Prepared, base: &RunSpec, arch: Arch, kind: OptimizerKind, ctx_cfg: &crate::config::RunConfig, seed: u64, seeds: &[u64]) -> Cell {
    let mut spec = base.clone();
    spec.model = ctx_cfg.model.resolve(arch, ctx_cfg.ingest.lookback);
    spec.optim = OptimizerConfig {
        kind,
        ..ctx_cfg.optim.clone()
    };
    let mut cell = Cell {
        model: arch.to_string(),
        optimizer: kind.to_string(),
        status: "ok".into(),
        error: None,
        lr: None,
        weight_decay: None,
        mean_nmse: None,
        std_nmse: None,
        seeds: Vec::new(),
        runs: Vec::new(),
    };
    let tuned = if ctx_cfg.train.n_trials == 0 {
        Ok(())
    } else {
        sweep(&p.dataset, &spec, ctx_cfg.train.n_trials, seed).map(|sw| {
            let best = sw.best();
            spec.optim.lr = best.lr;
            spec.optim.weight_decay = best.weight_decay;
        })
    };
    cell.lr = Some(spec.optim.lr);
    cell.weight_decay = Some(spec.optim.weight_decay);
    let res = tuned.and_then(|_| multi_seed(&p.dataset, &spec, seeds));
    match res {
        Ok(ms) => {
            cell.mean_nmse = Some(ms.mean_nmse);
            cell.std_nmse = Some(ms.std_nmse);
            cell.seeds = ms.runs.iter().map(|r| (r.seed, r.test_nmse)).collect();
            cell.runs = ms.runs;
        }
        Err(e) => {
            cell.status = "failed".into();
            cell.error = Some(e.to_string());
        }
    }
    info!("cell {arch}/{kind}: {}", cell.status);
    cell
}

fn linear_cell(name: &str, fit: impl FnOnce() -> Result<LinearModel>, test_x: &crate::Tensor, test_y: &[f64]) -> Cell {
    let mut cell = Cell {
        model: name.into(),
        optimizer: "closed-form".into(),
        status: "ok".into(),
        error: None,
        lr: None,
        weight_decay: None,
        mean_nmse: None,
        std_nmse: None,
        seeds: Vec::new(),
        runs: Vec::new(),
    };
    match fit().and_then(|m| nmse(&m.predict(test_x)?, test_y)) {
        Ok(v) => {
            cell.mean_nmse = Some(v);
            cell.std_nmse = Some(0.0);
        }
        Err(e) => {
            cell.status = "failed".into();
            cell.error = Some(e.to_string());
        }
    }
    cell
}

fn grid(ctx: &mut Ctx) -> Result<Outcome> {
    let p = prepared(ctx, None)?;
    let cfg = ctx.cfg.clone();
    let base = cfg.run_spec();
    let seeds: Vec<u64> = (0..cfg.train.n_seeds as u64).map(|i| ctx.seed + i).collect();
    let pairs: Vec<(Arch, OptimizerKind)> = Arch::GRID
        .iter()
        .flat_map(|&a| OptimizerKind::ALL.iter().map(move |&k| (a, k)))
        .collect();
    let mut cells: Vec<Cell> = pairs
        .par_iter()
        .map(|&(a, k)| grid_cell(&p, &base, a, k, &cfg, ctx.seed, &seeds))
        .collect();

    let (train, val, test) = (p.dataset.train(), p.dataset.val(), p.dataset.test());
    let tv = p.dataset.subset(&[Split::Train, Split::Val]);
    cells.push(linear_cell("ols", || ols_fit(&tv.inputs, &tv.targets), &test.inputs, &test.targets));
    cells.push(linear_cell(
        "lasso",
        || Ok(lasso_select(&train.inputs, &train.targets, &val.inputs, &val.targets, &LASSO_ALPHAS)?.model),
        &test.inputs,
        &test.targets,
    ));

    let mut w = ctx.writer("nmse.csv")?;
    w.write_record(["model", "optimizer", "mean_nmse", "std_nmse", "n_seeds", "status", "summary"])?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for c in &cells {
        let summary = match (c.mean_nmse, c.std_nmse) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "failed".into(),
        };
        w.write_record([
            c.model.clone(),
            c.optimizer.clone(),
            fmt(c.mean_nmse),
            fmt(c.std_nmse),
            c.seeds.len().to_string(),
            c.status.clone(),
            summary,
        ])?;
    }
    w.flush().map_err(|e| Error::io("nmse.csv", e))?;

    let mut w = ctx.writer("seeds.csv")?;
    w.write_record(["model", "optimizer", "seed", "test_nmse", "best_epoch", "lr", "weight_decay"])?;
    for c in &cells {
        for r in &c.runs {
            w.write_record([
                c.model.clone(),
                c.optimizer.clone(),
                r.seed.to_string(),
                r.test_nmse.to_string(),
                r.train.best_epoch.to_string(),
                r.train.lr.to_string(),
                r.train.weight_decay.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("seeds.csv", e))?;
    ctx.write_json("cells.json", &cells)?;
    let failed = cells.iter().filter(|c| c.status != "ok").count();
    if failed > 0 {
        log::warn!("{failed} grid cells failed");
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Ok)
}

fn diagnose(ctx: &mut Ctx, cmd: &DiagnoseCmd) -> Result<Outcome> {
    let deltas = ctx.cfg.diag.deltas();
    match cmd {
        DiagnoseCmd::Impulse { model, lag } => {
            let net = load_net(model)?;
            let l = net.lookback();
            let k = lag.or(ctx.cfg.diag.impulse_lag).unwrap_or(l - 1);
            let values = impulse_response(&net, k, &deltas)?;
            let mut w = ctx.writer("impulse.csv")?;
            w.write_record(["k", "delta", "value"])?;
            for (d, v) in deltas.iter().zip(&values) {
                w.write_record([k.to_string(), d.to_string(), v.to_string()])?;
            }
            w.flush().map_err(|e| Error::io("impulse.csv", e))?;
        }
        DiagnoseCmd::Surface { model } => {
            let net = load_net(model)?;
            let s = response_surface(&net, &ctx.cfg.diag.lags_for(net.lookback()), &deltas)?;
            write_surface(ctx, "surface.csv", &s)?;
        }
        DiagnoseCmd::Diff { model, other } => {
            let (a, b) = (load_net(model)?, load_net(other)?);
            if a.lookback() != b.lookback() {
                return Err(Error::GridMismatch("the two checkpoints have different windows".into()));
            }
            let lags = ctx.cfg.diag.lags_for(a.lookback());
            let d = difference_surface(&response_surface(&a, &lags, &deltas)?, &response_surface(&b, &lags, &deltas)?)?;
            let mut w = ctx.writer("diff.csv")?;
            w.write_record(["k", "delta", "value"])?;
            for (i, k) in d.lags.iter().enumerate() {
                for (j, dl) in d.deltas.iter().enumerate() {
                    w.write_record([k.to_string(), dl.to_string(), d.get(i, j).to_string()])?;
                }
            }
            w.flush().map_err(|e| Error::io("diff.csv", e))?;
            #[derive(Serialize)]
            struct Summary {
                planarity: f64,
                global_planarity: f64,
                max_abs: f64,
            }
            let s = Summary {
                planarity: d.planarity,
                global_planarity: d.global_planarity,
                max_abs: d.max_abs(),
            };
            ctx.write_json("diff.json", &s)?;
        }
        DiagnoseCmd::Shap { model } => {
            let net = load_net(model)?;
            let p = prepared(ctx, None)?;
            check_lookback(&net, p.dataset.lookback)?;
            let rows = p.dataset.test().head(ctx.cfg.diag.shap_rows);
            let mode = if ctx.cfg.diag.shap_exhaustive {
                ShapleyMode::Exhaustive
            } else {
                ShapleyMode::Sampled(ctx.cfg.diag.shap_perms)
            };
            let bg = vec![0.0; net.lookback()];
            let rep = shapley_attribution(&net, &rows.inputs, &bg, mode, ctx.seed)?;
            let mut w = ctx.writer("shap.csv")?;
            w.write_record(["lag", "mean_abs_phi", "stderr"])?;
            for (k, (m, s)) in rep.mean_abs_phi.iter().zip(&rep.stderr).enumerate() {
                w.write_record([k.to_string(), m.to_string(), s.to_string()])?;
            }
            w.flush().map_err(|e| Error::io("shap.csv", e))?;
            #[derive(Serialize)]
            struct Summary<'a> {
                rows: usize,
                n_perm: usize,
                /// Largest |Σφ − (ŷ(x) − ŷ(bg))| over rows.
                max_efficiency_gap: f64,
                mean_abs_phi: &'a [f64],
                stderr: &'a [f64],
            }
            let gap = rep
                .rows
                .iter()
                .map(|r| (r.phi.iter().sum::<f64>() - r.gap).abs())
                .fold(0.0, f64::max);
            let s = Summary {
                rows: rep.rows.len(),
                n_perm: rep.n_perm,
                max_efficiency_gap: gap,
                mean_abs_phi: &rep.mean_abs_phi,
                stderr: &rep.stderr,
            };
            ctx.write_json("shap.json", &s)?;
        }
    }
    Ok(Outcome::Ok)
}

fn curvature_trace(ctx: &mut Ctx) -> Result<Outcome> {
    let p = prepared(ctx, None)?;
    let data = p.dataset.train().head(ctx.cfg.curvature.probe_rows);
    let model = ctx.cfg.model();
    let params = init(&model, ctx.seed)?;
    let (trace, last) = record_trace(
        &model,
        params,
        &ctx.cfg.optim,
        &data,
        ctx.cfg.train.batch_size,
        ctx.seed,
        &ctx.cfg.curvature,
    )?;
    trace.write_csv(&ctx.path("trace.csv"))?;
    save_ckpt(ctx, "final.ckpt", &NeuralNet::new(model, last), ctx.cfg.curvature.steps)?;
    #[derive(Serialize)]
    struct Summary {
        rows: usize,
        threshold: f64,
        entry_step: Option<usize>,
        max_lambda: f64,
        final_lambda: f64,
    }
    let s = Summary {
        rows: data.len(),
        threshold: trace.threshold,
        entry_step: trace.entry_step(),
        max_lambda: trace.lambda_max.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_lambda: *trace.lambda_max.last().unwrap_or(&f64::NAN),
    };
    ctx.write_json("trace.json", &s)?;
    Ok(Outcome::Ok)
}

fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let col = |n: &str| {
        h.iter()
            .position(|x| x.trim() == n)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{n}`", path.display())))
    };
    let (dc, tc) = (col("d")?, col("t_star")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("{}: bad number", path.display())))
        };
        out.push((num(dc)?, num(tc)?));
    }
    Ok(out)
}

fn curvature_scaling(ctx: &mut Ctx, pairs: Option<&Path>, reported: bool, target: f64) -> Result<Outcome> {
    let pairs = if reported {
        REPORTED_ENTRY_PAIRS.to_vec()
    } else if let Some(path) = pairs {
        read_pairs(path)?
    } else {
        let p = prepared(ctx, None)?;
        let train = p.dataset.train();
        let model = ctx.cfg.model();
        let mut out = Vec::new();
        for &d in &ctx.cfg.curvature.sizes {
            let data = train.head(d);
            let (trace, _) = record_trace(
                &model,
                init(&model, ctx.seed)?,
                &ctx.cfg.optim,
                &data,
                ctx.cfg.train.batch_size,
                ctx.seed,
                &ctx.cfg.curvature,
            )?;
            match trace.entry_step() {
                Some(t) if t > 0 => out.push((data.len() as f64, t as f64)),
                _ => log::warn!("size {d}: no edge-of-stability entry within {} steps", ctx.cfg.curvature.steps),
            }
        }
        if out.len() < 2 {
            return Err(Error::Numeric {
                layer: "scaling: fewer than two sizes reached the threshold".into(),
            });
        }
        out
    };
    let fit = fit_scaling_law(&pairs)?;
    let mut w = ctx.writer("entries.csv")?;
    w.write_record(["d", "t_star"])?;
    for (d, t) in &fit.pairs {
        w.write_record([d.to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("entries.csv", e))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        fit: &'a crate::curvature::ScalingFit,
        target_size: f64,
        extrapolated_entry: f64,
        reported_entry: Option<f64>,
    }
    let s = Summary {
        fit: &fit,
        target_size: target,
        extrapolated_entry: extrapolate(&fit, target),
        reported_entry: reported.then_some(REPORTED_TARGET_ENTRY),
    };
    ctx.write_json("scaling.json", &s)?;
    Ok(Outcome::Ok)
}

fn intervene(ctx: &mut Ctx) -> Result<Outcome> {
    let target = ctx
        .cfg
        .curvature
        .target
        .clone()
        .ok_or_else(|| Error::Config("intervene needs a [curvature.target] optimizer".into()))?;
    let p = prepared(ctx, None)?;
    let data = p.dataset.train();
    let model = ctx.cfg.model();
    let spec = InterventionSpec {
        model: model.clone(),
        source: ctx.cfg.optim.clone(),
        target,
        swap_step: ctx.cfg.curvature.swap_step,
        continue_steps: ctx.cfg.curvature.continue_steps,
        batch_size: ctx.cfg.train.batch_size,
        seed: ctx.seed,
        lags: ctx.cfg.diag.lags_for(model.lookback),
        deltas: ctx.cfg.diag.deltas(),
        probe_rows: ctx.cfg.curvature.probe_rows,
        power: ctx.cfg.curvature.power,
    };
    let rep = run_intervention(&spec, &init(&model, ctx.seed)?, &data)?;
    write_surface(ctx, "pre_surface.csv", &rep.pre_surface)?;
    write_surface(ctx, "post_surface.csv", &rep.post_surface)?;
    write_surface(ctx, "baseline_surface.csv", &rep.baseline_surface)?;
    if let Some(sp) = &rep.swap_params {
        save_ckpt(ctx, "swap.ckpt", &NeuralNet::new(model.clone(), sp.clone()), spec.swap_step)?;
    }
    if let Some(pp) = &rep.post_params {
        save_ckpt(
            ctx,
            "post.ckpt",
            &NeuralNet::new(model.clone(), pp.clone()),
            spec.swap_step + spec.continue_steps,
        )?;
    }
    ctx.write_json("intervention.json", &rep)?;
    Ok(Outcome::Ok)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn ensemble_cmd(ctx: &mut Ctx, models: &[std::path::PathBuf]) -> Result<Outcome> {
    let p = prepared(ctx, None)?;
    let nets = models.iter().map(|m| load_net(m)).collect::<Result<Vec<_>>>()?;
    for n in &nets {
        check_lookback(n, p.dataset.lookback)?;
    }
    let mut ids: Vec<String> = models.iter().map(|m| stem(m)).collect();
    if ids.iter().collect::<std::collections::BTreeSet<_>>().len() != ids.len() {
        ids = models.iter().map(|m| m.display().to_string()).collect();
    }
    let members: Vec<&dyn Forecaster> = nets.iter().map(|n| n as &dyn Forecaster).collect();
    let test = p.dataset.test();
    let rep = ensemble_models(&ids, &members, &test.inputs, &test.targets)?;
    ctx.write_json("ensemble.json", &rep)?;
    Ok(Outcome::Ok)
}

type DateMap = BTreeMap<i32, BTreeMap<AssetId, f64>>;

/// Out-of-sample forecasts of next-day volatility, keyed by formation date.
fn forecasts_for(p: &Prepared, model: &dyn Forecaster) -> Result<DateMap> {
    let test = p.dataset.test();
    let z = model.predict(&test.inputs)?;
    let st = &p.dataset.stats;
    let ann = crate::ingest::ANNUALIZATION;
    let mut out: DateMap = BTreeMap::new();
    for (i, &row) in test.rows.iter().enumerate() {
        let target_date = p.dataset.target_date[row];
        let Some(ci) = p.panel.calendar_index(target_date) else { continue };
        if ci == 0 {
            continue;
        }
        let vol = ((z[i] * st.std + st.mean).exp() / ann).sqrt();
        out.entry(p.panel.calendar[ci - 1])
            .or_default()
            .insert(p.dataset.asset[row], vol);
    }
    Ok(out)
}

fn portfolio_cmd(ctx: &mut Ctx, args: &PortfolioArgs) -> Result<Outcome> {
    let mut panels: Vec<(String, ForecastPanel)> = Vec::new();
    if let (Some(f), Some(r)) = (&args.forecasts, &args.returns) {
        panels.push((stem(f), ForecastPanel::load(f, r)?));
    }
    if !args.models.is_empty() {
        let p = prepared(ctx, None)?;
        let mut returns: DateMap = BTreeMap::new();
        for (id, bars) in &p.panel.assets {
            for b in bars {
                returns.entry(b.date).or_default().insert(*id, b.ret);
            }
        }
        let train = p.dataset.train();
        let val = p.dataset.val();
        let tv = p.dataset.subset(&[Split::Train, Split::Val]);
        for spec in &args.models {
            let name = spec.split_once('=').map_or_else(
                || model_path(spec).map_or(spec.clone(), |path| stem(&path)),
                |(n, _)| n.to_string(),
            );
            let fc = match spec.split_once('=').map_or(spec.as_str(), |(_, p)| p) {
                "ols" => forecasts_for(&p, &ols_fit(&tv.inputs, &tv.targets)?)?,
                "lasso" => forecasts_for(
                    &p,
                    &lasso_select(&train.inputs, &train.targets, &val.inputs, &val.targets, &LASSO_ALPHAS)?.model,
                )?,
                path => {
                    let net = load_net(Path::new(path))?;
                    check_lookback(&net, p.dataset.lookback)?;
                    forecasts_for(&p, &net)?
                }
            };
            panels.push((name, ForecastPanel::with_calendar(p.panel.calendar.clone(), fc, returns.clone())));
        }
    }
    if panels.is_empty() {
        return Err(Error::Config("portfolio needs --forecasts/--returns or --models".into()));
    }
    let pc = ctx.cfg.portfolio.clone();
    let window = args.window.unwrap_or(pc.window);

    let mut perf_out = ctx.writer("performance.csv")?;
    perf_out.write_record([
        "model",
        "quintile",
        "ann_return",
        "ann_vol",
        "sharpe",
        "max_drawdown",
        "turnover",
        "target_turnover",
        "days",
        "skipped_dates",
        "dropped_assets",
    ])?;
    let mut roll = ctx.writer("rolling_turnover.csv")?;
    roll.write_record(["model", "quintile", "date", "turnover"])?;
    for (name, fp) in &panels {
        for &q in &pc.quintiles {
            let s = portfolio_returns(fp, q)?;
            let perf = perf_summary(&s, pc.periods_per_year)?;
            perf_out.write_record([
                name.clone(),
                format!("Q{q}"),
                perf.ann_return.to_string(),
                perf.ann_vol.to_string(),
                perf.sharpe.to_string(),
                perf.max_drawdown.to_string(),
                perf.mean_turnover.to_string(),
                perf.mean_target_turnover.to_string(),
                perf.n_days.to_string(),
                s.skipped_dates.to_string(),
                s.dropped_assets.to_string(),
            ])?;
            let r = rolling_mean(&s.turnover, window);
            // turnover[i] is traded on dates[i + 1], so r[j], which averages
            // turnover[j..j + window], ends on dates[j + window].
            for (j, v) in r.iter().enumerate() {
                let date = s.dates[j + window];
                roll.write_record([name.clone(), format!("Q{q}"), crate::ingest::date_to_iso(date), v.to_string()])?;
            }
        }
    }
    perf_out.flush().map_err(|e| Error::io("performance.csv", e))?;
    roll.flush().map_err(|e| Error::io("rolling_turnover.csv", e))?;

    let refs: Vec<(String, &ForecastPanel)> = panels.iter().map(|(n, p)| (n.clone(), p)).collect();
    let rows = frontier(&refs, &pc.quintiles)?;
    let mut w = ctx.writer("frontier.csv")?;
    w.write_record(["model", "quintile", "sharpe", "mean_turnover", "ann_return", "ann_vol", "max_drawdown"])?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            format!("Q{}", r.quintile),
            r.sharpe.to_string(),
            r.mean_turnover.to_string(),
            r.ann_return.to_string(),
            r.ann_vol.to_string(),
            r.max_drawdown.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("frontier.csv", e))?;
    for (name, fp) in &panels {
        fp.write_forecasts(&ctx.path(&format!("forecasts_{name}.csv")))?;
    }
    if let Some((_, fp)) = panels.first() {
        fp.write_returns(&ctx.path("returns.csv"))?;
    }
    Ok(Outcome::Ok)
}
