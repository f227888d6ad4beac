//! Command-line front end. Every subcommand reads one [`RunConfig`], writes
//! its artifacts into a content-addressed run directory, and finishes with a
//! `manifest.json` listing the effective config, seed, input hashes and
//! output hashes.

mod commands;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{sha256_file, sha256_hex, RunConfig};
use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "optprior", version, about = "Train volatility forecasters under SGD, Adam and Muon and probe what they learned")]
pub struct Cli {
    /// Run config (TOML). Omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Config override, e.g. `--set train.batch_size=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic OHLC panel as CSV.
    Synth,
    /// Build the windowed dataset.
    Ingest {
        /// Read this CSV panel instead of the configured source.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one model (early stopping, then refit on train ∪ val).
    Train,
    /// Random search over learning rate and weight decay.
    Sweep,
    /// Every architecture × optimizer cell over several seeds, plus OLS and LASSO.
    Grid,
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    #[command(subcommand)]
    Curvature(CurvatureCmd),
    /// Swap optimizers mid-run (hard reset) and compare with a from-scratch baseline.
    Intervene,
    /// Equal-weight ensemble of checkpoints with its ambiguity decomposition.
    Ensemble {
        #[arg(long, num_args = 2.., required = true)]
        models: Vec<PathBuf>,
    },
    /// Volatility-quintile portfolios, turnover and the Sharpe/turnover frontier.
    Portfolio(PortfolioArgs),
}

#[derive(Debug, Subcommand)]
pub enum DiagnoseCmd {
    /// Response to a shock at one lag.
    Impulse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lag: Option<usize>,
    },
    /// Response surface over lags and shocks.
    Surface {
        #[arg(long)]
        model: PathBuf,
    },
    /// Difference of two response surfaces.
    Diff {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        other: PathBuf,
    },
    /// Permutation Shapley attributions on test rows.
    Shap {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CurvatureCmd {
    /// λ_max and batch sharpness along a training run.
    Trace,
    /// Fit `t* ≈ α·D^β` to entry steps and extrapolate.
    Scaling {
        /// CSV with columns `d,t_star`.
        #[arg(long, conflicts_with = "reported")]
        pairs: Option<PathBuf>,
        /// Use the four reported full-scale readings.
        #[arg(long)]
        reported: bool,
        /// Dataset size to extrapolate to.
        #[arg(long, default_value_t = crate::curvature::REPORTED_TARGET_SIZE)]
        target: f64,
    },
}

#[derive(Debug, Args)]
pub struct PortfolioArgs {
    /// Long CSV `date,asset,forecast`; needs `--returns`.
    #[arg(long, requires = "returns")]
    pub forecasts: Option<PathBuf>,
    /// Long CSV `date,asset,ret`.
    #[arg(long)]
    pub returns: Option<PathBuf>,
    /// Models scored on the test split: `name=path.ckpt`, `path.ckpt`,
    /// `ols` or `lasso`.
    #[arg(long, num_args = 1..)]
    pub models: Vec<String>,
    /// Rolling turnover window (overrides `portfolio.window`).
    #[arg(long)]
    pub window: Option<usize>,
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Synth => "synth".into(),
            Command::Ingest { .. } => "ingest".into(),
            Command::Train => "train".into(),
            Command::Sweep => "sweep".into(),
            Command::Grid => "grid".into(),
            Command::Diagnose(d) => format!(
                "diagnose-{}",
                match d {
                    DiagnoseCmd::Impulse { .. } => "impulse",
                    DiagnoseCmd::Surface { .. } => "surface",
                    DiagnoseCmd::Diff { .. } => "diff",
                    DiagnoseCmd::Shap { .. } => "shap",
                }
            ),
            Command::Curvature(CurvatureCmd::Trace) => "curvature-trace".into(),
            Command::Curvature(CurvatureCmd::Scaling { .. }) => "curvature-scaling".into(),
            Command::Intervene => "intervene".into(),
            Command::Ensemble { .. } => "ensemble".into(),
            Command::Portfolio(_) => "portfolio".into(),
        }
    }

    /// Files the command reads besides the config.
    fn input_files(&self) -> Vec<PathBuf> {
        match self {
            Command::Ingest { input } => input.iter().cloned().collect(),
            Command::Diagnose(
                DiagnoseCmd::Impulse { model, .. } | DiagnoseCmd::Surface { model } | DiagnoseCmd::Shap { model },
            ) => vec![model.clone()],
            Command::Diagnose(DiagnoseCmd::Diff { model, other }) => vec![model.clone(), other.clone()],
            Command::Curvature(CurvatureCmd::Scaling { pairs, .. }) => pairs.iter().cloned().collect(),
            Command::Ensemble { models } => models.clone(),
            Command::Portfolio(p) => p
                .forecasts
                .iter()
                .chain(&p.returns)
                .cloned()
                .chain(p.models.iter().filter_map(|m| model_path(m)))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Extra arguments that change the output and so belong in the hash.
    fn arg_fingerprint(&self) -> String {
        format!("{self:?}")
    }
}

/// `name=path` / `path` / `ols` / `lasso` → the checkpoint path, if any.
pub(crate) fn model_path(spec: &str) -> Option<PathBuf> {
    let p = spec.split_once('=').map_or(spec, |(_, p)| p);
    match p {
        "ols" | "lasso" => None,
        _ => Some(PathBuf::from(p)),
    }
}

/// What a finished command reports back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Some independent units (grid cells) failed; the rest were written.
    Partial,
    /// Artifacts were written but the run itself diverged.
    Diverged,
}

/// Everything a command needs to write its outputs.
pub struct Ctx {
    pub cfg: RunConfig,
    pub seed: u64,
    pub dir: PathBuf,
    outputs: Vec<String>,
}

impl Ctx {
    pub fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn writer(&mut self, name: &str) -> Result<csv::Writer<std::fs::File>> {
        let p = self.path(name);
        Ok(csv::Writer::from_path(p)?)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: String,
    seed: u64,
    config: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    status: &'a str,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

/// Parses `args` (including the program name) and runs. Returns the exit
/// code; diagnostics go to stderr, the run directory to stdout.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match run_inner(&cli) {
        Ok((dir, outcome)) => {
            println!("{}", dir.display());
            match outcome {
                Outcome::Ok => EXIT_OK,
                Outcome::Partial => EXIT_PARTIAL,
                Outcome::Diverged => EXIT_NUMERIC,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Run directory for a command: `<out>/<command>-<first 16 hex of the hash>`.
pub fn run_dir(out: &Path, command: &str, cfg: &RunConfig, seed: u64, fingerprint: &str, inputs: &BTreeMap<String, String>) -> PathBuf {
    let mut key = format!("{command}\n{seed}\n{fingerprint}\n{}", cfg.effective_toml());
    for (p, h) in inputs {
        key.push_str(&format!("\n{p}={h}"));
    }
    out.join(format!("{command}-{}", &sha256_hex(key.as_bytes())[..16]))
}

fn run_inner(cli: &Cli) -> Result<(PathBuf, Outcome)> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;
    let mut inputs = BTreeMap::new();
    let mut files = cli.command.input_files();
    if cfg.ingest.source == crate::ingest::Source::Csv {
        if let Some(p) = &cfg.ingest.path {
            files.push(PathBuf::from(p));
        }
    }
    for f in files {
        inputs.insert(f.display().to_string(), sha256_file(&f)?);
    }
    let name = cli.command.name();
    let dir = run_dir(&cli.out, &name, &cfg, seed, &cli.command.arg_fingerprint(), &inputs);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ctx = Ctx {
        cfg,
        seed,
        dir: dir.clone(),
        outputs: Vec::new(),
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be ≥ 1".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| commands::dispatch(&cli.command, &mut ctx))?;

    let mut outputs = BTreeMap::new();
    ctx.outputs.sort();
    ctx.outputs.dedup();
    for o in &ctx.outputs {
        outputs.insert(o.clone(), sha256_file(&dir.join(o))?);
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: &name,
        args: cli.command.arg_fingerprint(),
        seed,
        config: ctx.cfg.effective_toml(),
        inputs,
        outputs,
        status: match outcome {
            Outcome::Ok => "ok",
            Outcome::Partial => "partial",
            Outcome::Diverged => "diverged",
        },
    };
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok((dir, outcome))
}
