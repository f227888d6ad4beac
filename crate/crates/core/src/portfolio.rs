//! Volatility-quintile portfolios built from forecasts: daily equal-weight
//! reconstitution, drift-adjusted turnover, performance summaries and the
//! Sharpe/turnover frontier.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{date_from_iso, date_to_iso, AssetId};

pub const QUINTILES: usize = 5;
pub const PERIODS_PER_YEAR: f64 = 252.0;

/// Forecasts formed at the close of each calendar date, and the realized
/// simple returns per date. A forecast made on `calendar[j]` ranks the
/// returns of `calendar[j + 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastPanel {
    pub calendar: Vec<i32>,
    pub forecasts: BTreeMap<i32, BTreeMap<AssetId, f64>>,
    pub returns: BTreeMap<i32, BTreeMap<AssetId, f64>>,
}

impl ForecastPanel {
    /// Calendar is the sorted union of forecast and return dates.
    pub fn new(
        forecasts: BTreeMap<i32, BTreeMap<AssetId, f64>>,
        returns: BTreeMap<i32, BTreeMap<AssetId, f64>>,
    ) -> Self {
        let mut calendar: Vec<i32> = forecasts.keys().chain(returns.keys()).copied().collect();
        calendar.sort_unstable();
        calendar.dedup();
        Self {
            calendar,
            forecasts,
            returns,
        }
    }

    /// Same as [`Self::new`] but with an explicit trading calendar.
    pub fn with_calendar(
        calendar: Vec<i32>,
        forecasts: BTreeMap<i32, BTreeMap<AssetId, f64>>,
        returns: BTreeMap<i32, BTreeMap<AssetId, f64>>,
    ) -> Self {
        Self {
            calendar,
            forecasts,
            returns,
        }
    }

    /// Reads `date,asset,forecast` and `date,asset,ret` files.
    pub fn load(forecasts: &Path, returns: &Path) -> Result<Self> {
        Ok(Self::new(read_long(forecasts, "forecast")?, read_long(returns, "ret")?))
    }

    pub fn write_forecasts(&self, path: &Path) -> Result<()> {
        write_long(path, "forecast", &self.forecasts)
    }

    pub fn write_returns(&self, path: &Path) -> Result<()> {
        write_long(path, "ret", &self.returns)
    }
}

fn read_long(path: &Path, value_col: &str) -> Result<BTreeMap<i32, BTreeMap<AssetId, f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let (dc, ac, vc) = (col("date")?, col("asset")?, col(value_col)?);
    let mut out: BTreeMap<i32, BTreeMap<AssetId, f64>> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Schema(format!("{}: row {}: bad {what}", path.display(), line + 2));
        let date = date_from_iso(rec.get(dc).unwrap_or("").trim()).map_err(|_| bad("date"))?;
        let asset: AssetId = rec.get(ac).unwrap_or("").trim().parse().map_err(|_| bad("asset"))?;
        let v: f64 = rec.get(vc).unwrap_or("").trim().parse().map_err(|_| bad(value_col))?;
        out.entry(date).or_default().insert(asset, v);
    }
    Ok(out)
}

fn write_long(path: &Path, value_col: &str, m: &BTreeMap<i32, BTreeMap<AssetId, f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "asset", value_col])?;
    for (d, row) in m {
        for (a, v) in row {
            w.write_record([date_to_iso(*d), a.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Assets per quintile, `buckets[0]` = Q1 = lowest forecast.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuintileAssignment {
    pub buckets: [Vec<AssetId>; QUINTILES],
}

impl QuintileAssignment {
    pub fn sizes(&self) -> [usize; QUINTILES] {
        std::array::from_fn(|q| self.buckets[q].len())
    }

    /// Members of quintile `q` (1-based).
    pub fn quintile(&self, q: usize) -> &[AssetId] {
        &self.buckets[q - 1]
    }
}

/// Ascending sort by forecast (ties by asset id) cut into five buckets whose
/// sizes differ by at most one, the extra names going to the lower
/// quintiles. Non-finite forecasts are ignored. `None` with fewer than five
/// usable assets.
pub fn quintile_sort(forecasts: &BTreeMap<AssetId, f64>) -> Option<QuintileAssignment> {
    let mut v: Vec<(f64, AssetId)> = forecasts
        .iter()
        .filter(|(_, f)| f.is_finite())
        .map(|(a, f)| (*f, *a))
        .collect();
    if v.len() < QUINTILES {
        return None;
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (base, rem) = (v.len() / QUINTILES, v.len() % QUINTILES);
    let mut it = v.into_iter().map(|(_, a)| a);
    let buckets = std::array::from_fn(|q| {
        let size = base + usize::from(q < rem);
        it.by_ref().take(size).collect()
    });
    Some(QuintileAssignment { buckets })
}

/// One quintile's book over time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSeries {
    pub quintile: usize,
    /// Holding dates (the day whose return is earned).
    pub dates: Vec<i32>,
    /// Target weights set at the close before each holding date.
    pub weights: Vec<BTreeMap<AssetId, f64>>,
    pub returns: Vec<f64>,
    /// Drift-adjusted turnover at each rebalance after the first.
    pub turnover: Vec<f64>,
    /// Same, comparing target weights directly (no drift).
    pub target_turnover: Vec<f64>,
    /// Formation dates with fewer than five ranked assets or no next day.
    pub skipped_dates: usize,
    /// Members dropped because their return was missing.
    pub dropped_assets: usize,
}

/// Weights after one period of returns, renormalized, and the gross growth
/// of the book. Missing returns count as zero.
pub fn drift_weights(w: &BTreeMap<AssetId, f64>, r: &BTreeMap<AssetId, f64>) -> (BTreeMap<AssetId, f64>, f64) {
    let grown: BTreeMap<AssetId, f64> = w
        .iter()
        .map(|(a, wi)| (*a, wi * (1.0 + r.get(a).copied().unwrap_or(0.0))))
        .collect();
    let gross: f64 = grown.values().sum();
    (grown.into_iter().map(|(a, x)| (a, x / gross)).collect(), gross)
}

/// `½ Σ |w_new − w_old|` over the union of holdings.
pub fn half_l1(new: &BTreeMap<AssetId, f64>, old: &BTreeMap<AssetId, f64>) -> f64 {
    let mut s = 0.0;
    for (a, w) in new {
        s += (w - old.get(a).copied().unwrap_or(0.0)).abs();
    }
    for (a, w) in old {
        if !new.contains_key(a) {
            s += w.abs();
        }
    }
    0.5 * s
}

/// Equal-weight book of quintile `q` (1-based), reconstituted every date.
pub fn portfolio_returns(panel: &ForecastPanel, q: usize) -> Result<PortfolioSeries> {
    if !(1..=QUINTILES).contains(&q) {
        return Err(Error::OutOfRange(format!("quintile {q} not in 1..=5")));
    }
    let mut s = PortfolioSeries {
        quintile: q,
        ..Default::default()
    };
    let empty = BTreeMap::new();
    let mut prev: Option<(BTreeMap<AssetId, f64>, i32)> = None;
    for (j, &d) in panel.calendar.iter().enumerate() {
        let Some(fc) = panel.forecasts.get(&d) else { continue };
        let (Some(assign), Some(&hold)) = (quintile_sort(fc), panel.calendar.get(j + 1)) else {
            s.skipped_dates += 1;
            continue;
        };
        let rets = panel.returns.get(&hold).unwrap_or(&empty);
        let members: Vec<AssetId> = assign.quintile(q).iter().copied().filter(|a| rets.contains_key(a)).collect();
        s.dropped_assets += assign.quintile(q).len() - members.len();
        if members.is_empty() {
            s.skipped_dates += 1;
            continue;
        }
        let wi = 1.0 / members.len() as f64;
        let w: BTreeMap<AssetId, f64> = members.iter().map(|a| (*a, wi)).collect();
        let ret = members.iter().map(|a| rets[a]).sum::<f64>() * wi;
        if let Some((pw, pdate)) = &prev {
            let (drifted, gross) = drift_weights(pw, panel.returns.get(pdate).unwrap_or(&empty));
            if !(gross > 0.0) {
                return Err(Error::DegenerateDay { date: *pdate, gross });
            }
            s.turnover.push(half_l1(&w, &drifted));
            s.target_turnover.push(half_l1(&w, pw));
        }
        if !(1.0 + ret > 0.0) {
            return Err(Error::DegenerateDay { date: hold, gross: 1.0 + ret });
        }
        prev = Some((w.clone(), hold));
        s.dates.push(hold);
        s.weights.push(w);
        s.returns.push(ret);
    }
    Ok(s)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trailing mean over `window` observations; the first value covers
/// `v[..window]`.
pub fn rolling_mean(v: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || v.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(v.len() - window + 1);
    let mut acc: f64 = v[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..v.len() {
        acc += v[i] - v[i - window];
        out.push(acc / window as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfSummary {
    pub ann_return: f64,
    pub ann_vol: f64,
    pub sharpe: f64,
    pub max_drawdown: f64,
    pub mean_turnover: f64,
    pub mean_target_turnover: f64,
    pub n_days: usize,
}

/// Largest peak-to-trough loss of compounded wealth, starting from 1.
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let (mut wealth, mut peak, mut dd) = (1.0_f64, 1.0_f64, 0.0_f64);
    for r in returns {
        wealth *= 1.0 + r;
        peak = peak.max(wealth);
        dd = dd.min(wealth / peak - 1.0);
    }
    dd
}

/// Annualized mean and sample volatility, Sharpe against a zero rate,
/// and max drawdown of a daily return series.
pub fn perf_from_returns(returns: &[f64], periods_per_year: f64) -> Result<(f64, f64, f64, f64)> {
    if returns.len() < 2 {
        return Err(Error::Domain("performance summary needs at least two returns".into()));
    }
    let m = mean(returns);
    let var = returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (returns.len() - 1) as f64;
    let ann_ret = m * periods_per_year;
    let ann_vol = var.sqrt() * periods_per_year.sqrt();
    // rounding in the mean leaves a tiny variance on a constant series
    if ann_vol == 0.0 || returns.iter().all(|r| *r == returns[0]) {
        return Err(Error::ZeroVolatility);
    }
    Ok((ann_ret, ann_vol, ann_ret / ann_vol, max_drawdown(returns)))
}

pub fn perf_summary(series: &PortfolioSeries, periods_per_year: f64) -> Result<PerfSummary> {
    let (ann_return, ann_vol, sharpe, max_drawdown) = perf_from_returns(&series.returns, periods_per_year)?;
    Ok(PerfSummary {
        ann_return,
        ann_vol,
        sharpe,
        max_drawdown,
        mean_turnover: mean(&series.turnover),
        mean_target_turnover: mean(&series.target_turnover),
        n_days: series.returns.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub model: String,
    pub quintile: usize,
    pub ann_return: f64,
    pub ann_vol: f64,
    pub sharpe: f64,
    pub max_drawdown: f64,
    pub mean_turnover: f64,
}

/// One row per (model, quintile), sorted by mean turnover (then model and
/// quintile). All panels must share the trading calendar and returns.
pub fn frontier(models: &[(String, &ForecastPanel)], quintiles: &[usize]) -> Result<Vec<FrontierRow>> {
    if let Some((first_name, first)) = models.first() {
        for (name, p) in &models[1..] {
            if p.calendar != first.calendar || p.returns != first.returns {
                return Err(Error::CalendarMismatch(format!("`{name}` does not share the calendar of `{first_name}`")));
            }
        }
    }
    let mut rows = Vec::new();
    for (name, p) in models {
        for &q in quintiles {
            let s = portfolio_returns(p, q)?;
            let perf = perf_summary(&s, PERIODS_PER_YEAR)?;
            rows.push(FrontierRow {
                model: name.clone(),
                quintile: q,
                ann_return: perf.ann_return,
                ann_vol: perf.ann_vol,
                sharpe: perf.sharpe,
                max_drawdown: perf.max_drawdown,
                mean_turnover: perf.mean_turnover,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.mean_turnover
            .total_cmp(&b.mean_turnover)
            .then_with(|| a.model.cmp(&b.model))
            .then(a.quintile.cmp(&b.quintile))
    });
    Ok(rows)
}
