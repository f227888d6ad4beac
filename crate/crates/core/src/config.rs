//! The run config: one TOML file with `ingest`, `model`, `optim`, `train`,
//! `diag`, `curvature` and `portfolio` sections. Unknown keys are errors.
//! Every field has a default, so an empty file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::CurvatureConfig;
use crate::diagnostics::default_deltas;
use crate::error::{Error, Result};
use crate::ingest::IngestConfig;
use crate::models::{Arch, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::train::{RunSpec, TrainConfig};

/// Layer-size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// The full-size networks.
    Full,
    /// Narrow networks that train in seconds.
    Desk,
    /// A few hundred to a few thousand parameters.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub size: ModelSize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            size: ModelSize::Full,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, arch: Arch, lookback: usize) -> ModelConfig {
        match self.size {
            ModelSize::Full => ModelConfig::full(arch, lookback),
            ModelSize::Desk => ModelConfig::desk(arch, lookback),
            ModelSize::Tiny => ModelConfig::tiny(arch, lookback),
        }
    }
}

/// `diag.*`: probe grids for impulse responses, surfaces and Shapley.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    /// Lags on the surface grid; empty means every column of the window.
    pub lags: Vec<usize>,
    /// Shock grid; empty means 81 points over [−4, 4].
    pub deltas: Vec<f64>,
    /// Column probed by `diagnose impulse`; defaults to the most recent lag.
    pub impulse_lag: Option<usize>,
    /// Test rows attributed by `diagnose shap`.
    pub shap_rows: usize,
    /// Orderings per row.
    pub shap_perms: usize,
    /// Enumerate all orderings instead of sampling (window ≤ 8 only).
    pub shap_exhaustive: bool,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            lags: Vec::new(),
            deltas: Vec::new(),
            impulse_lag: None,
            shap_rows: 1000,
            shap_perms: 64,
            shap_exhaustive: false,
        }
    }
}

impl DiagConfig {
    pub fn lags_for(&self, lookback: usize) -> Vec<usize> {
        if self.lags.is_empty() {
            (0..lookback).collect()
        } else {
            self.lags.clone()
        }
    }

    pub fn deltas(&self) -> Vec<f64> {
        if self.deltas.is_empty() {
            default_deltas()
        } else {
            self.deltas.clone()
        }
    }
}

/// `portfolio.*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioConfig {
    /// Rolling turnover window in trading days.
    pub window: usize,
    pub quintiles: Vec<usize>,
    pub periods_per_year: f64,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            window: 252,
            quintiles: vec![1, 5],
            periods_per_year: crate::portfolio::PERIODS_PER_YEAR,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ingest: IngestConfig,
    pub model: ModelSection,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub diag: DiagConfig,
    pub curvature: CurvatureConfig,
    pub portfolio: PortfolioConfig,
}

impl RunConfig {
    /// Parses TOML text after applying `key.path=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.train.validate()?;
        self.model().validate()?;
        if let Some(t) = &self.curvature.target {
            t.validate()?;
        }
        if self.portfolio.quintiles.iter().any(|q| !(1..=5).contains(q)) {
            return Err(Error::Config("portfolio.quintiles entries must lie in 1..=5".into()));
        }
        Ok(())
    }

    /// The configured model at the ingest lookback.
    pub fn model(&self) -> ModelConfig {
        self.model.resolve(self.model.arch, self.ingest.lookback)
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model(),
            optim: self.optim.clone(),
            train: self.train.clone(),
        }
    }

    /// Canonical TOML of the config with every default filled in.
    pub fn effective_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        cur = match cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
