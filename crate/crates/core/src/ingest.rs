//! OHLC panels, Garman-Klass log-variance targets, preprocessing and
//! windowing into a supervised dataset.
//!
//! Pipeline: [`load_panel`] or [`synth_panel`] → [`build_targets`] →
//! [`fit_preprocess`] on the training partition → [`split_and_window`].
//! [`prepare`] runs all of it from an [`IngestConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type AssetId = u32;

/// Variance floor applied before taking logs.
pub const VAR_FLOOR: f64 = 1e-12;
pub const ANNUALIZATION: f64 = 252.0;

/// One trading day for one asset. `date` is the day number counted from
/// 0001-01-01 (day 1), see [`date_from_iso`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcBar {
    pub date: i32,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub ret: f64,
}

impl OhlcBar {
    /// `high ≥ max(open, close)`, `low ≤ min(open, close)`, `high ≥ low > 0`,
    /// everything finite.
    pub fn is_valid(&self) -> bool {
        let all_finite = [self.open, self.high, self.low, self.close, self.ret]
            .iter()
            .all(|v| v.is_finite());
        all_finite
            && self.low > 0.0
            && self.high >= self.low
            && self.high >= self.open.max(self.close)
            && self.low <= self.open.min(self.close)
    }
}

pub fn date_from_iso(s: &str) -> Result<i32> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map(|d| d.num_days_from_ce())
        .map_err(|e| Error::Schema(format!("bad date `{s}`: {e}")))
}

pub fn date_to_iso(d: i32) -> String {
    NaiveDate::from_num_days_from_ce_opt(d)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| d.to_string())
}

/// Per-asset bar series plus the sorted union of their dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub assets: BTreeMap<AssetId, Vec<OhlcBar>>,
    pub calendar: Vec<i32>,
}

impl Panel {
    /// Sorts each asset's bars and builds the calendar. Fails if any asset
    /// repeats a date.
    pub fn new(mut assets: BTreeMap<AssetId, Vec<OhlcBar>>) -> Result<Self> {
        let mut cal = BTreeSet::new();
        for (id, bars) in assets.iter_mut() {
            bars.sort_by_key(|b| b.date);
            if bars.windows(2).any(|w| w[0].date == w[1].date) {
                return Err(Error::Schema(format!("asset {id} repeats a date")));
            }
            cal.extend(bars.iter().map(|b| b.date));
        }
        Ok(Self {
            assets,
            calendar: cal.into_iter().collect(),
        })
    }

    pub fn n_bars(&self) -> usize {
        self.assets.values().map(Vec::len).sum()
    }

    /// Position of `date` in the calendar.
    pub fn calendar_index(&self, date: i32) -> Option<usize> {
        self.calendar.binary_search(&date).ok()
    }

    /// Writes the panel in the loader's CSV layout.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(f));
        w.write_record(["permno", "date", "open", "high", "low", "close", "ret"])?;
        for (id, bars) in &self.assets {
            for b in bars {
                w.write_record([
                    id.to_string(),
                    date_to_iso(b.date),
                    format!("{:?}", b.open),
                    format!("{:?}", b.high),
                    format!("{:?}", b.low),
                    format!("{:?}", b.close),
                    format!("{:?}", b.ret),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Column names of the input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub asset: String,
    pub date: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub ret: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            asset: "permno".into(),
            date: "date".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            ret: "ret".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedPanel {
    pub panel: Panel,
    /// Rows that failed to parse, broke a bar invariant, or repeated a date.
    pub dropped: usize,
}

/// Reads a CSV panel. Invalid rows are dropped and counted.
pub fn load_panel(path: &Path, schema: &ColumnMap) -> Result<LoadedPanel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(BufReader::new(f), schema)
}

pub fn read_panel<R: Read>(reader: R, schema: &ColumnMap) -> Result<LoadedPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let idx = [
        col(&schema.asset)?,
        col(&schema.date)?,
        col(&schema.open)?,
        col(&schema.high)?,
        col(&schema.low)?,
        col(&schema.close)?,
        col(&schema.ret)?,
    ];
    let mut dropped = 0;
    let mut assets: BTreeMap<AssetId, BTreeMap<i32, OhlcBar>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| field(i).parse::<f64>().ok();
        let parsed = (|| {
            let id: AssetId = field(0).parse().ok()?;
            let date = date_from_iso(field(1)).ok()?;
            let bar = OhlcBar {
                date,
                open: num(2)?,
                high: num(3)?,
                low: num(4)?,
                close: num(5)?,
                ret: num(6)?,
            };
            Some((id, bar))
        })();
        match parsed {
            Some((id, bar)) if bar.is_valid() => {
                let series = assets.entry(id).or_default();
                if series.contains_key(&bar.date) {
                    dropped += 1;
                } else {
                    series.insert(bar.date, bar);
                }
            }
            _ => dropped += 1,
        }
    }
    if assets.is_empty() {
        return Err(Error::EmptyPanel(format!("no valid rows ({dropped} dropped)")));
    }
    let assets = assets
        .into_iter()
        .map(|(id, m)| (id, m.into_values().collect()))
        .collect();
    Ok(LoadedPanel {
        panel: Panel::new(assets)?,
        dropped,
    })
}

/// Parameters of the synthetic volatility process.
///
/// Daily log-variance follows a stationary AR(1)
/// `h_t = μ + φ(h_{t−1} − μ) + σ_h·√(1 − φ²)·z_t`, so `σ_h` is its
/// unconditional standard deviation. Each day's price path is a Brownian
/// motion with variance `exp(h_t)` sampled at `substeps` points; open is the
/// previous close, high/low are the path extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolParams {
    pub persistence: f64,
    pub log_var_sd: f64,
    pub mean_log_var: f64,
    pub substeps: usize,
    pub start_price: f64,
}

impl Default for VolParams {
    fn default() -> Self {
        Self {
            persistence: 0.9,
            log_var_sd: 0.8,
            // about 25% annualised volatility
            mean_log_var: (0.25f64 * 0.25 / ANNUALIZATION).ln(),
            substeps: 32,
            start_price: 100.0,
        }
    }
}

/// First asset id handed out by [`synth_panel`].
pub const SYNTH_FIRST_ID: AssetId = 10001;

/// Weekday calendar starting 2000-01-03.
pub fn business_days(n: usize) -> Vec<i32> {
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d.num_days_from_ce());
        }
        d = d.succ_opt().unwrap();
    }
    out
}

/// Deterministic synthetic panel. Asset `i` draws from ChaCha stream `i` of
/// the seed, so adding assets never changes existing ones.
pub fn synth_panel(n_assets: usize, n_days: usize, vol: &VolParams, seed: u64) -> Result<Panel> {
    if !(0.0..1.0).contains(&vol.persistence) {
        return Err(Error::NonstationaryConfig(vol.persistence));
    }
    if n_assets == 0 || n_days < 2 {
        return Err(Error::Config(format!(
            "synthetic panel needs ≥ 1 asset and ≥ 2 days, got {n_assets} × {n_days}"
        )));
    }
    if vol.substeps == 0 || !(vol.start_price > 0.0) || !(vol.log_var_sd >= 0.0) {
        return Err(Error::Config("substeps, start_price and log_var_sd must be positive".into()));
    }
    let calendar = business_days(n_days);
    let phi = vol.persistence;
    let innov = vol.log_var_sd * (1.0 - phi * phi).sqrt();
    let m = vol.substeps;
    let mut assets = BTreeMap::new();
    for a in 0..n_assets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(a as u64);
        let mut h = vol.mean_log_var + vol.log_var_sd * rng.sample::<f64, _>(StandardNormal);
        let mut prev_close = vol.start_price;
        let mut bars = Vec::with_capacity(n_days);
        for &date in &calendar {
            let step_sd = (h.exp() / m as f64).sqrt();
            let open = prev_close;
            let (mut x, mut hi, mut lo) = (0.0f64, 0.0f64, 0.0f64);
            for _ in 0..m {
                x += step_sd * rng.sample::<f64, _>(StandardNormal);
                hi = hi.max(x);
                lo = lo.min(x);
            }
            let close = open * x.exp();
            bars.push(OhlcBar {
                date,
                open,
                high: open * hi.exp(),
                low: open * lo.exp(),
                close,
                ret: close / prev_close - 1.0,
            });
            prev_close = close;
            h = vol.mean_log_var + phi * (h - vol.mean_log_var) + innov * rng.sample::<f64, _>(StandardNormal);
        }
        assets.insert(SYNTH_FIRST_ID + a as AssetId, bars);
    }
    Ok(Panel { assets, calendar })
}

/// Raw Garman-Klass daily variance `½(ln H/L)² − (2 ln 2 − 1)(ln C/O)²`.
/// Not floored; can be slightly negative when the close-open move is large
/// relative to the range.
pub fn garman_klass_raw(bar: &OhlcBar) -> Result<f64> {
    if !(bar.open > 0.0 && bar.high > 0.0 && bar.low > 0.0 && bar.close > 0.0) {
        return Err(Error::Domain(format!("nonpositive price on day {}", bar.date)));
    }
    let hl = (bar.high / bar.low).ln();
    let co = (bar.close / bar.open).ln();
    Ok(0.5 * hl * hl - (2.0 * std::f64::consts::LN_2 - 1.0) * co * co)
}

/// Garman-Klass variance clamped below at `floor`.
pub fn garman_klass(bar: &OhlcBar, floor: f64) -> Result<f64> {
    Ok(garman_klass_raw(bar)?.max(floor))
}

/// One log-variance observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetObs {
    pub date: i32,
    /// Index of `date` in the panel calendar.
    pub cal_idx: usize,
    pub value: f64,
}

pub type TargetSeries = BTreeMap<AssetId, Vec<TargetObs>>;

/// `ln(annualization · max(GK, floor))` per bar, aligned with the bars.
pub fn build_targets(panel: &Panel, annualization: f64, floor: f64) -> Result<TargetSeries> {
    if panel.assets.is_empty() {
        return Err(Error::EmptyPanel("no assets".into()));
    }
    let mut out = BTreeMap::new();
    for (&id, bars) in &panel.assets {
        let mut series = Vec::with_capacity(bars.len());
        for b in bars {
            let cal_idx = panel
                .calendar_index(b.date)
                .ok_or_else(|| Error::Schema(format!("date {} missing from calendar", b.date)))?;
            series.push(TargetObs {
                date: b.date,
                cal_idx,
                value: (annualization * garman_klass(b, floor)?).ln(),
            });
        }
        out.insert(id, series);
    }
    Ok(out)
}

/// Winsorization bounds for one asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const NONE: Bounds = Bounds {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    #[serde(with = "bounds_map")]
    pub bounds: BTreeMap<AssetId, Bounds>,
    pub mean: f64,
    pub std: f64,
}

// JSON has no infinities; store them as null.
mod bounds_map {
    use super::{AssetId, Bounds};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Repr {
        lo: Option<f64>,
        hi: Option<f64>,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<AssetId, Bounds>, s: S) -> Result<S::Ok, S::Error> {
        let f = |v: f64| v.is_finite().then_some(v);
        m.iter()
            .map(|(k, b)| (k.to_string(), Repr { lo: f(b.lo), hi: f(b.hi) }))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<AssetId, Bounds>, D::Error> {
        let raw = BTreeMap::<String, Repr>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, r)| {
                let id = k.parse().map_err(serde::de::Error::custom)?;
                let b = Bounds {
                    lo: r.lo.unwrap_or(f64::NEG_INFINITY),
                    hi: r.hi.unwrap_or(f64::INFINITY),
                };
                Ok((id, b))
            })
            .collect()
    }
}

impl PreprocessStats {
    /// No clamping, zero mean, unit scale.
    pub fn identity() -> Self {
        Self {
            bounds: BTreeMap::new(),
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn bounds_for(&self, asset: AssetId) -> Bounds {
        self.bounds.get(&asset).copied().unwrap_or(Bounds::NONE)
    }

    /// `(clamp(x, lo, hi) − μ) / σ` with the asset's bounds.
    pub fn apply(&self, asset: AssetId, x: f64) -> f64 {
        let b = self.bounds_for(asset);
        (x.clamp(b.lo, b.hi) - self.mean) / self.std
    }
}

/// Linear-interpolation quantile of sorted data (`h = (n − 1)q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-asset winsorization quantiles, then a global mean and population
/// standard deviation of the winsorized values.
pub fn fit_preprocess(train: &BTreeMap<AssetId, Vec<f64>>, q: (f64, f64)) -> Result<PreprocessStats> {
    if !(0.0..=1.0).contains(&q.0) || !(0.0..=1.0).contains(&q.1) || q.0 > q.1 {
        return Err(Error::Config(format!("bad quantile pair {q:?}")));
    }
    let mut bounds = BTreeMap::new();
    let mut clipped = Vec::new();
    for (&id, vals) in train {
        let mut s = vals.clone();
        s.sort_by(f64::total_cmp);
        if s.len() < 2 || s[0] == s[s.len() - 1] {
            return Err(Error::ZeroVariance(format!(
                "asset {id} has fewer than 2 distinct training values"
            )));
        }
        let b = Bounds {
            lo: quantile_sorted(&s, q.0),
            hi: quantile_sorted(&s, q.1),
        };
        clipped.extend(vals.iter().map(|v| v.clamp(b.lo, b.hi)));
        bounds.insert(id, b);
    }
    if clipped.is_empty() {
        return Err(Error::EmptyPanel("no training values".into()));
    }
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance("winsorized training values are constant".into()));
    }
    Ok(PreprocessStats {
        bounds,
        mean,
        std: var.sqrt(),
    })
}

pub fn apply_preprocess(asset: AssetId, series: &[f64], stats: &PreprocessStats) -> Vec<f64> {
    series.iter().map(|&x| stats.apply(asset, x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Schema(format!("bad split code {v}"))),
        }
    }
}

/// Calendar indices where val and test begin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub n_days: usize,
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitBoundaries {
    /// Integer partition of `n_days` in the given ratio.
    pub fn new(n_days: usize, ratio: [u32; 3]) -> Result<Self> {
        let total: u64 = ratio.iter().map(|&r| r as u64).sum();
        if total == 0 || ratio[0] == 0 {
            return Err(Error::Config(format!("bad split ratio {ratio:?}")));
        }
        let n = n_days as u64;
        Ok(Self {
            n_days,
            train_end: (n * ratio[0] as u64 / total) as usize,
            val_end: (n * (ratio[0] + ratio[1]) as u64 / total) as usize,
        })
    }

    pub fn label(&self, cal_idx: usize) -> Split {
        if cal_idx < self.train_end {
            Split::Train
        } else if cal_idx < self.val_end {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Pooled supervised windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `(n, L)` standardized lags, oldest first (column `L − 1` is `t − 1`).
    pub inputs: Tensor,
    pub targets: Vec<f64>,
    pub split: Vec<Split>,
    pub target_date: Vec<i32>,
    pub asset: Vec<AssetId>,
    pub lookback: usize,
    pub boundaries: SplitBoundaries,
    pub stats: PreprocessStats,
}

/// Rows of one or more splits, copied out.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub inputs: Tensor,
    pub targets: Vec<f64>,
    pub rows: Vec<usize>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// First `n` rows (all of them if fewer).
    pub fn head(&self, n: usize) -> Subset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Subset {
        Subset {
            inputs: self.inputs.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
        }
    }
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn count(&self, s: Split) -> usize {
        self.split.iter().filter(|&&x| x == s).count()
    }

    pub fn subset(&self, splits: &[Split]) -> Subset {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| splits.contains(&self.split[i])).collect();
        Subset {
            inputs: self.inputs.select_rows(&rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            rows,
        }
    }

    pub fn train(&self) -> Subset {
        self.subset(&[Split::Train])
    }

    pub fn val(&self) -> Subset {
        self.subset(&[Split::Val])
    }

    pub fn test(&self) -> Subset {
        self.subset(&[Split::Test])
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`.
    ///
    /// The blob holds, little-endian and in order: inputs (`n·L` f64), targets
    /// (`n` f64), target dates (`n` i32), asset ids (`n` u32), split codes
    /// (`n` u8; 0 train, 1 val, 2 test).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin = dir.join(format!("{stem}.bin"));
        let f = File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&bin, e);
        for v in self.inputs.data().iter().chain(&self.targets) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for d in &self.target_date {
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        for a in &self.asset {
            w.write_all(&a.to_le_bytes()).map_err(io)?;
        }
        let codes: Vec<u8> = self.split.iter().map(|&s| s as u8).collect();
        w.write_all(&codes).map_err(io)?;
        w.flush().map_err(io)?;

        let side = Sidecar {
            rows: self.len(),
            lookback: self.lookback,
            counts: [Split::Train, Split::Val, Split::Test].map(|s| self.count(s)),
            boundaries: self.boundaries,
            stats: self.stats.clone(),
            layout: "inputs f64[n*L], targets f64[n], target_date i32[n], asset u32[n], split u8[n]; little-endian".into(),
        };
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let side: Sidecar =
            serde_json::from_slice(&std::fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bin = dir.join(format!("{stem}.bin"));
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let (n, l) = (side.rows, side.lookback);
        let expect = 8 * n * l + 8 * n + 4 * n + 4 * n + n;
        if bytes.len() != expect {
            return Err(Error::Schema(format!(
                "{}: {} bytes, expected {expect}",
                bin.display(),
                bytes.len()
            )));
        }
        let mut off = 0;
        let mut take = |k: usize| {
            let s = &bytes[off..off + k];
            off += k;
            s
        };
        let f64s = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let inputs = f64s(take(8 * n * l));
        let targets = f64s(take(8 * n));
        let target_date = take(4 * n)
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let asset = take(4 * n)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let split = take(n).iter().map(|&c| Split::from_u8(c)).collect::<Result<_>>()?;
        Ok(Self {
            inputs: Tensor::new(vec![n, l], inputs)?,
            targets,
            split,
            target_date,
            asset,
            lookback: l,
            boundaries: side.boundaries,
            stats: side.stats,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rows: usize,
    lookback: usize,
    counts: [usize; 3],
    boundaries: SplitBoundaries,
    stats: PreprocessStats,
    layout: String,
}

/// Counts of assets left out of the windowed dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowReport {
    /// Assets with too few observations for a single window.
    pub short_assets: usize,
    /// Assets without enough training history to fit winsorization bounds.
    pub unfit_assets: usize,
    /// Windows dropped because consecutive observations were too far apart.
    pub gap_windows: usize,
}

/// Windowing options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub ratio: [u32; 3],
    /// Largest allowed step, in calendar positions, between consecutive
    /// observations inside one window (including the target).
    pub max_gap: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            lookback: 100,
            ratio: [3, 1, 1],
            max_gap: 10,
        }
    }
}

/// Standardizes every series with `stats` and cuts per-asset sliding
/// windows. Row labels follow the calendar position of each target. Assets
/// absent from `stats.bounds` are skipped (counted as unfit) unless `stats`
/// has no bounds at all.
pub fn split_and_window(
    targets: &TargetSeries,
    n_calendar: usize,
    stats: &PreprocessStats,
    spec: &WindowSpec,
) -> Result<(WindowedDataset, WindowReport)> {
    let l = spec.lookback;
    if l == 0 {
        return Err(Error::Config("lookback must be ≥ 1".into()));
    }
    let boundaries = SplitBoundaries::new(n_calendar, spec.ratio)?;
    let mut report = WindowReport::default();
    let mut inputs = Vec::new();
    let mut ys = Vec::new();
    let mut split = Vec::new();
    let mut dates = Vec::new();
    let mut asset = Vec::new();
    for (&id, series) in targets {
        if !stats.bounds.is_empty() && !stats.bounds.contains_key(&id) {
            report.unfit_assets += 1;
            continue;
        }
        if series.len() < l + 1 {
            report.short_assets += 1;
            continue;
        }
        let z: Vec<f64> = series.iter().map(|o| stats.apply(id, o.value)).collect();
        for t in l..series.len() {
            let span = &series[t - l..=t];
            if span.windows(2).any(|w| w[1].cal_idx - w[0].cal_idx > spec.max_gap) {
                report.gap_windows += 1;
                continue;
            }
            inputs.extend_from_slice(&z[t - l..t]);
            ys.push(z[t]);
            split.push(boundaries.label(series[t].cal_idx));
            dates.push(series[t].date);
            asset.push(id);
        }
    }
    let n = ys.len();
    Ok((
        WindowedDataset {
            inputs: Tensor::new(vec![n, l], inputs)?,
            targets: ys,
            split,
            target_date: dates,
            asset,
            lookback: l,
            boundaries,
            stats: stats.clone(),
        },
        report,
    ))
}

/// Raw training-partition values per asset. Assets with fewer than two
/// distinct training values are left out.
pub fn training_values(targets: &TargetSeries, boundaries: &SplitBoundaries) -> BTreeMap<AssetId, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (&id, s) in targets {
        let v: Vec<f64> = s
            .iter()
            .filter(|o| o.cal_idx < boundaries.train_end)
            .map(|o| o.value)
            .collect();
        let distinct = v.iter().any(|x| v.first().is_some_and(|f| x != f));
        if v.len() >= 2 && distinct {
            out.insert(id, v);
        }
    }
    out
}

/// Where the panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synth,
    Csv,
}

/// `ingest.*` section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub source: Source,
    /// CSV path when `source = "csv"`.
    pub path: Option<String>,
    pub columns: ColumnMap,
    pub n_assets: usize,
    pub n_days: usize,
    pub vol: VolParams,
    pub lookback: usize,
    pub split_ratio: [u32; 3],
    pub max_gap: usize,
    pub winsor_lo: f64,
    pub winsor_hi: f64,
    pub var_floor: f64,
    pub annualization: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            source: Source::Synth,
            path: None,
            columns: ColumnMap::default(),
            n_assets: 20,
            n_days: 1500,
            vol: VolParams::default(),
            lookback: 100,
            split_ratio: [3, 1, 1],
            max_gap: 10,
            winsor_lo: 0.005,
            winsor_hi: 0.995,
            var_floor: VAR_FLOOR,
            annualization: ANNUALIZATION,
        }
    }
}

impl IngestConfig {
    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            ratio: self.split_ratio,
            max_gap: self.max_gap,
        }
    }
}

/// Everything the ingest stage produces.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub panel: Panel,
    pub dataset: WindowedDataset,
    pub report: WindowReport,
    pub dropped_rows: usize,
}

/// Panel → targets → stats → windows.
pub fn prepare_panel(panel: Panel, dropped_rows: usize, cfg: &IngestConfig) -> Result<Prepared> {
    if !(cfg.var_floor > 0.0) {
        return Err(Error::Config("var_floor must be > 0".into()));
    }
    let targets = build_targets(&panel, cfg.annualization, cfg.var_floor)?;
    let spec = cfg.window_spec();
    let boundaries = SplitBoundaries::new(panel.calendar.len(), spec.ratio)?;
    let train = training_values(&targets, &boundaries);
    let stats = fit_preprocess(&train, (cfg.winsor_lo, cfg.winsor_hi))?;
    let (dataset, report) = split_and_window(&targets, panel.calendar.len(), &stats, &spec)?;
    if dataset.count(Split::Train) == 0 {
        return Err(Error::EmptyPanel("no training windows".into()));
    }
    Ok(Prepared {
        panel,
        dataset,
        report,
        dropped_rows,
    })
}

/// Loads or synthesizes the panel named by `cfg` and runs the pipeline.
pub fn prepare(cfg: &IngestConfig, seed: u64) -> Result<Prepared> {
    match cfg.source {
        Source::Synth => {
            let panel = synth_panel(cfg.n_assets, cfg.n_days, &cfg.vol, seed)?;
            prepare_panel(panel, 0, cfg)
        }
        Source::Csv => {
            let path = cfg
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("ingest.path is required when ingest.source = \"csv\"".into()))?;
            let loaded = load_panel(Path::new(path), &cfg.columns)?;
            prepare_panel(loaded.panel, loaded.dropped, cfg)
        }
    }
}
