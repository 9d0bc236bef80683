//! Technical indicators and feature-matrix assembly.
//!
//! Every indicator returns an [`IndicatorColumn`] whose leading warm-up
//! entries are explicitly absent, never zero-filled, so downstream
//! windowing can only ever see real values. Windowed indicators recompute
//! each window from scratch instead of carrying running sums; the O(n·w)
//! cost is irrelevant at daily-bar scale and keeps batch results bit-stable
//! under shifting and appending.
//!
//! Column order in an assembled matrix is fixed: `logret`, `range`, the
//! SMA periods in config order, the EMA periods, `roc_k`, `rsi_n`, `macd`,
//! `macd_signal`, `macd_hist`, `stoch_k`, `stoch_d`, `atr_n`, `vol_w`,
//! `bb_mid`, `bb_up`, `bb_low`, `force`, `obv`, `cci_n`, and `close` last.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::OhlcvSeries;

/// One indicator series aligned to the source bars. Exactly the first
/// `warmup_len` values are absent; everything after is present and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorColumn {
    name: String,
    values: Vec<Option<f64>>,
    warmup_len: usize,
}

impl IndicatorColumn {
    pub fn new(name: impl Into<String>, values: Vec<Option<f64>>, warmup_len: usize) -> Result<Self> {
        let name = name.into();
        if values.len() < warmup_len {
            return Err(Error::TooShort {
                what: format!("column `{name}` with warm-up {warmup_len}"),
                needed: warmup_len,
                got: values.len(),
            });
        }
        for (i, v) in values.iter().enumerate() {
            let ok = if i < warmup_len {
                v.is_none()
            } else {
                v.map(f64::is_finite).unwrap_or(false)
            };
            if !ok {
                return Err(Error::NonFinite {
                    context: format!("column `{name}` at index {i} (warm-up {warmup_len})"),
                });
            }
        }
        Ok(IndicatorColumn { name, values, warmup_len })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn warmup_len(&self) -> usize {
        self.warmup_len
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The values past warm-up, unwrapped.
    pub fn present(&self) -> Vec<f64> {
        self.values[self.warmup_len..]
            .iter()
            .map(|v| v.expect("validated present"))
            .collect()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.values.get(index).copied().flatten()
    }
}

/// Builds a column from per-index values where `None` marks warm-up;
/// `warmup_len` is inferred as the count of leading absences.
fn column(name: impl Into<String>, values: Vec<Option<f64>>) -> Result<IndicatorColumn> {
    let warmup = values.iter().take_while(|v| v.is_none()).count();
    IndicatorColumn::new(name, values, warmup)
}

/// Which indicators to compute and with what periods. Empty lists and
/// `None` fields switch families off; the default matches the standard
/// feature set (SMA/EMA 5-10-20-50, ROC 10, RSI 14, MACD 12/26/9,
/// stochastic 14/3, ATR 14, 20-day volatility, Bollinger 20/±2σ,
/// CCI 20/0.015, log returns, price range).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndicatorConfig {
    pub sma_periods: Vec<usize>,
    pub ema_periods: Vec<usize>,
    pub roc_period: Option<usize>,
    pub rsi_period: Option<usize>,
    pub macd: Option<(usize, usize, usize)>,
    pub stoch: Option<(usize, usize)>,
    pub atr_period: Option<usize>,
    pub vol_window: Option<usize>,
    pub bollinger: Option<(usize, f64)>,
    pub cci: Option<(usize, f64)>,
    pub include_log_returns: bool,
    pub include_price_range: bool,
    pub include_force: bool,
    pub include_obv: bool,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            sma_periods: vec![5, 10, 20, 50],
            ema_periods: vec![5, 10, 20, 50],
            roc_period: Some(10),
            rsi_period: Some(14),
            macd: Some((12, 26, 9)),
            stoch: Some((14, 3)),
            atr_period: Some(14),
            vol_window: Some(20),
            bollinger: Some((20, 2.0)),
            cci: Some((20, 0.015)),
            include_log_returns: true,
            include_price_range: true,
            include_force: true,
            include_obv: true,
        }
    }
}

impl IndicatorConfig {
    /// Close column only; no indicators, so no warm-up.
    pub fn minimal() -> Self {
        IndicatorConfig {
            sma_periods: Vec::new(),
            ema_periods: Vec::new(),
            roc_period: None,
            rsi_period: None,
            macd: None,
            stoch: None,
            atr_period: None,
            vol_window: None,
            bollinger: None,
            cci: None,
            include_log_returns: false,
            include_price_range: false,
            include_force: false,
            include_obv: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::BadConfig { detail });
        for (list, what) in [(&self.sma_periods, "sma"), (&self.ema_periods, "ema")] {
            if list.iter().any(|&p| p == 0) {
                return bad(format!("{what} period 0"));
            }
            if list.len() != list.iter().collect::<BTreeSet<_>>().len() {
                return bad(format!("duplicate {what} periods"));
            }
        }
        for (p, what) in [
            (self.roc_period, "roc"),
            (self.rsi_period, "rsi"),
            (self.atr_period, "atr"),
            (self.vol_window, "volatility"),
        ] {
            if p == Some(0) {
                return bad(format!("{what} period 0"));
            }
        }
        if let Some((f, s, g)) = self.macd {
            if f == 0 || s == 0 || g == 0 {
                return bad("macd period 0".into());
            }
        }
        if let Some((k, d)) = self.stoch {
            if k == 0 || d == 0 {
                return bad("stochastic period 0".into());
            }
        }
        if let Some((p, mult)) = self.bollinger {
            if p == 0 || !(mult > 0.0) {
                return bad(format!("bollinger ({p}, {mult})"));
            }
        }
        if let Some((p, scale)) = self.cci {
            if p == 0 || !(scale > 0.0) {
                return bad(format!("cci ({p}, {scale})"));
            }
        }
        Ok(())
    }
}

// ----- individual indicators -----

/// `ln(P_t / P_{t-1})`, warm-up 1.
pub fn log_returns(closes: &[f64]) -> Result<IndicatorColumn> {
    if closes.len() < 2 {
        return Err(Error::TooShort { what: "log returns".into(), needed: 2, got: closes.len() });
    }
    if let Some(bad) = closes.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::NonFinite { context: format!("log return of non-positive close {bad}") });
    }
    let mut values = vec![None];
    for pair in closes.windows(2) {
        values.push(Some((pair[1] / pair[0]).ln()));
    }
    column("logret", values)
}

/// `(H_t - L_t) / C_t`, defined everywhere.
pub fn price_range(series: &OhlcvSeries) -> Result<IndicatorColumn> {
    let values = series
        .bars()
        .iter()
        .map(|b| Some((b.high - b.low) / b.close))
        .collect();
    column("range", values)
}

/// Trailing mean over `period` values, warm-up `period - 1`.
pub fn sma(values: &[f64], period: usize) -> Result<IndicatorColumn> {
    sma_named(format!("sma_{period}"), values, period)
}

fn sma_named(name: String, values: &[f64], period: usize) -> Result<IndicatorColumn> {
    if period == 0 {
        return Err(Error::BadConfig { detail: "sma period 0".into() });
    }
    if values.len() < period {
        return Err(Error::TooShort { what: name, needed: period, got: values.len() });
    }
    let mut out = vec![None; period - 1];
    for window in values.windows(period) {
        out.push(Some(window.iter().sum::<f64>() / period as f64));
    }
    column(name, out)
}

/// Exponential moving average with `alpha = 2/(period+1)`, seeded from the
/// first value so there is no warm-up.
pub fn ema(values: &[f64], period: usize) -> Result<IndicatorColumn> {
    Ok(IndicatorColumn::new(format!("ema_{period}"), ema_values(values, period)?, 0)?)
}

fn ema_values(values: &[f64], period: usize) -> Result<Vec<Option<f64>>> {
    if period == 0 {
        return Err(Error::BadConfig { detail: "ema period 0".into() });
    }
    if values.is_empty() {
        return Err(Error::TooShort { what: "ema".into(), needed: 1, got: 0 });
    }
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut state = values[0];
    let mut out = Vec::with_capacity(values.len());
    out.push(Some(state));
    for &v in &values[1..] {
        state = alpha * v + (1.0 - alpha) * state;
        out.push(Some(state));
    }
    Ok(out)
}

/// Rate of change `100 * (P_t - P_{t-k}) / P_{t-k}`, warm-up `k`.
pub fn roc(closes: &[f64], period: usize) -> Result<IndicatorColumn> {
    if period == 0 {
        return Err(Error::BadConfig { detail: "roc period 0".into() });
    }
    if closes.len() <= period {
        return Err(Error::TooShort { what: "roc".into(), needed: period + 1, got: closes.len() });
    }
    let mut values = vec![None; period];
    for t in period..closes.len() {
        values.push(Some(100.0 * (closes[t] - closes[t - period]) / closes[t - period]));
    }
    column(format!("roc_{period}"), values)
}

/// Relative strength via EMA-smoothed gains and losses: warm-up 1, bounded
/// in [0, 100], with all-zero-loss mapped to 100 and flat markets to 50.
pub fn rsi(closes: &[f64], period: usize) -> Result<IndicatorColumn> {
    if closes.len() <= period {
        return Err(Error::TooShort { what: "rsi".into(), needed: period + 1, got: closes.len() });
    }
    let (mut ups, mut downs) = (Vec::new(), Vec::new());
    for pair in closes.windows(2) {
        let delta = pair[1] - pair[0];
        ups.push(delta.max(0.0));
        downs.push((-delta).max(0.0));
    }
    let up_ema = ema_values(&ups, period)?;
    let down_ema = ema_values(&downs, period)?;
    let mut values = vec![None];
    for (u, d) in up_ema.iter().zip(&down_ema) {
        let (u, d) = (u.expect("ema has no warm-up"), d.expect("ema has no warm-up"));
        let v = if d == 0.0 {
            if u > 0.0 {
                100.0
            } else {
                50.0
            }
        } else {
            let rs = u / d;
            100.0 - 100.0 / (1.0 + rs)
        };
        values.push(Some(v));
    }
    column(format!("rsi_{period}"), values)
}

/// MACD line, signal line, and histogram. The seeded EMA leaves all three
/// defined from the first bar.
pub fn macd(
    closes: &[f64],
    fast: usize,
    slow: usize,
    signal: usize,
) -> Result<(IndicatorColumn, IndicatorColumn, IndicatorColumn)> {
    let fast_ema = ema_values(closes, fast)?;
    let slow_ema = ema_values(closes, slow)?;
    let line: Vec<f64> = fast_ema
        .iter()
        .zip(&slow_ema)
        .map(|(f, s)| f.unwrap() - s.unwrap())
        .collect();
    let signal_line = ema_values(&line, signal)?;
    let hist: Vec<Option<f64>> = line
        .iter()
        .zip(&signal_line)
        .map(|(m, s)| Some(m - s.unwrap()))
        .collect();
    Ok((
        IndicatorColumn::new("macd", line.iter().map(|v| Some(*v)).collect(), 0)?,
        IndicatorColumn::new("macd_signal", signal_line, 0)?,
        IndicatorColumn::new("macd_hist", hist, 0)?,
    ))
}

/// Stochastic oscillator: `%K` over a trailing `k_period` high/low window
/// (flat windows map to 50) and `%D` as its `d_period` SMA. Warm-ups are
/// `k_period - 1` and `k_period + d_period - 2`.
pub fn stochastic(
    series: &OhlcvSeries,
    k_period: usize,
    d_period: usize,
) -> Result<(IndicatorColumn, IndicatorColumn)> {
    if k_period == 0 || d_period == 0 {
        return Err(Error::BadConfig { detail: "stochastic period 0".into() });
    }
    let needed = k_period + d_period - 1;
    if series.len() < needed {
        return Err(Error::TooShort { what: "stochastic %K/%D".into(), needed, got: series.len() });
    }
    let bars = series.bars();
    let mut k_values = vec![None; k_period - 1];
    for t in (k_period - 1)..bars.len() {
        let window = &bars[t + 1 - k_period..=t];
        let high = window.iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max);
        let low = window.iter().map(|b| b.low).fold(f64::INFINITY, f64::min);
        let k = if high == low {
            50.0
        } else {
            100.0 * (bars[t].close - low) / (high - low)
        };
        k_values.push(Some(k));
    }
    let k_col = column("stoch_k", k_values)?;
    let d_over_present = sma_named("stoch_d".into(), &k_col.present(), d_period)?;
    let mut d_values = vec![None; k_col.warmup_len()];
    d_values.extend(d_over_present.values().iter().copied());
    let d_col = IndicatorColumn::new("stoch_d", d_values, k_period + d_period - 2)?;
    Ok((k_col, d_col))
}

/// Average true range: EMA of `max(|H-L|, |H-C_prev|, |L-C_prev|)`,
/// warm-up 1.
pub fn atr(series: &OhlcvSeries, period: usize) -> Result<IndicatorColumn> {
    if series.len() < 2 {
        return Err(Error::TooShort { what: "atr".into(), needed: 2, got: series.len() });
    }
    let bars = series.bars();
    let tr: Vec<f64> = bars
        .windows(2)
        .map(|pair| {
            let (prev, cur) = (&pair[0], &pair[1]);
            (cur.high - cur.low)
                .abs()
                .max((cur.high - prev.close).abs())
                .max((cur.low - prev.close).abs())
        })
        .collect();
    let smoothed = ema_values(&tr, period)?;
    let mut values = vec![None];
    values.extend(smoothed);
    column(format!("atr_{period}"), values)
}

/// Rolling population standard deviation of an already-aligned returns
/// column; the output warm-up extends the input's by `window - 1`.
pub fn rolling_volatility(returns: &IndicatorColumn, window: usize) -> Result<IndicatorColumn> {
    if window < 2 {
        return Err(Error::BadConfig { detail: format!("volatility window {window} < 2") });
    }
    let present = returns.present();
    if present.len() < window {
        return Err(Error::TooShort {
            what: "rolling volatility".into(),
            needed: window,
            got: present.len(),
        });
    }
    let mut values = vec![None; returns.warmup_len() + window - 1];
    for w in present.windows(window) {
        let mean = w.iter().sum::<f64>() / window as f64;
        let var = w.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / window as f64;
        values.push(Some(var.sqrt()));
    }
    column(format!("vol_{window}"), values)
}

/// Bollinger bands: 20-day SMA middle with upper/lower at
/// `multiplier` population standard deviations. Warm-up `period - 1`.
pub fn bollinger(
    closes: &[f64],
    period: usize,
    multiplier: f64,
) -> Result<(IndicatorColumn, IndicatorColumn, IndicatorColumn)> {
    if period == 0 || !(multiplier > 0.0) {
        return Err(Error::BadConfig { detail: format!("bollinger ({period}, {multiplier})") });
    }
    if closes.len() < period {
        return Err(Error::TooShort { what: "bollinger".into(), needed: period, got: closes.len() });
    }
    let warm = vec![None; period - 1];
    let (mut mid, mut up, mut low) = (warm.clone(), warm.clone(), warm);
    for w in closes.windows(period) {
        let mean = w.iter().sum::<f64>() / period as f64;
        let var = w.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / period as f64;
        let dev = multiplier * var.sqrt();
        mid.push(Some(mean));
        up.push(Some(mean + dev));
        low.push(Some(mean - dev));
    }
    Ok((column("bb_mid", mid)?, column("bb_up", up)?, column("bb_low", low)?))
}

/// Force index `(C_t - C_{t-1}) * Volume_t`, warm-up 1.
pub fn force_index(series: &OhlcvSeries) -> Result<IndicatorColumn> {
    if series.len() < 2 {
        return Err(Error::TooShort { what: "force index".into(), needed: 2, got: series.len() });
    }
    let mut values = vec![None];
    for pair in series.bars().windows(2) {
        values.push(Some((pair[1].close - pair[0].close) * pair[1].volume));
    }
    column("force", values)
}

/// On-balance volume: starts at 0, adds volume on up-closes, subtracts on
/// down-closes, holds on equal closes.
pub fn obv(series: &OhlcvSeries) -> Result<IndicatorColumn> {
    if series.is_empty() {
        return Err(Error::TooShort { what: "obv".into(), needed: 1, got: 0 });
    }
    let mut values = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    values.push(Some(acc));
    for pair in series.bars().windows(2) {
        if pair[1].close > pair[0].close {
            acc += pair[1].volume;
        } else if pair[1].close < pair[0].close {
            acc -= pair[1].volume;
        }
        values.push(Some(acc));
    }
    column("obv", values)
}

/// Commodity channel index on typical price `(H+L+C)/3` with the window's
/// own SMA and mean absolute deviation; MD of zero maps to 0. Warm-up
/// `period - 1`.
pub fn cci(series: &OhlcvSeries, period: usize, scale: f64) -> Result<IndicatorColumn> {
    if period == 0 || !(scale > 0.0) {
        return Err(Error::BadConfig { detail: format!("cci ({period}, {scale})") });
    }
    if series.len() < period {
        return Err(Error::TooShort { what: "cci".into(), needed: period, got: series.len() });
    }
    let tp: Vec<f64> = series.bars().iter().map(|b| (b.high + b.low + b.close) / 3.0).collect();
    let mut values = vec![None; period - 1];
    for w in tp.windows(period) {
        let mean = w.iter().sum::<f64>() / period as f64;
        let md = w.iter().map(|t| (t - mean).abs()).sum::<f64>() / period as f64;
        let current = w[period - 1];
        let v = if md == 0.0 { 0.0 } else { (current - mean) / (scale * md) };
        values.push(Some(v));
    }
    column(format!("cci_{period}"), values)
}

// ----- assembly -----

/// All indicator columns plus the raw close, sharing one date axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dates: Vec<NaiveDate>,
    columns: Vec<IndicatorColumn>,
    effective_start: usize,
}

impl FeatureMatrix {
    /// Validates the shared length, unique names, and computes
    /// `effective_start` as the largest warm-up.
    pub fn new(dates: Vec<NaiveDate>, columns: Vec<IndicatorColumn>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::NoRows { what: "feature matrix columns".into() });
        }
        let mut names = BTreeSet::new();
        for col in &columns {
            if col.len() != dates.len() {
                return Err(Error::SchemaMismatch {
                    detail: format!(
                        "column `{}` has {} rows, expected {}",
                        col.name(),
                        col.len(),
                        dates.len()
                    ),
                });
            }
            if !names.insert(col.name().to_string()) {
                return Err(Error::SchemaMismatch {
                    detail: format!("duplicate column `{}`", col.name()),
                });
            }
        }
        let effective_start = columns.iter().map(|c| c.warmup_len()).max().unwrap_or(0);
        if effective_start >= dates.len() {
            return Err(Error::TooShort {
                what: "feature matrix after warm-up".into(),
                needed: effective_start + 1,
                got: dates.len(),
            });
        }
        Ok(FeatureMatrix { dates, columns, effective_start })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn columns(&self) -> &[IndicatorColumn] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&IndicatorColumn> {
        self.columns.iter().find(|c| c.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name()).collect()
    }

    pub fn effective_start(&self) -> usize {
        self.effective_start
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Row-major values from `effective_start` on, every cell present.
    /// Returns the dates alongside, aligned one-to-one with the rows.
    pub fn dense_rows(&self) -> (Vec<NaiveDate>, Vec<Vec<f64>>) {
        let dates = self.dates[self.effective_start..].to_vec();
        let rows = (self.effective_start..self.len())
            .map(|i| {
                self.columns
                    .iter()
                    .map(|c| c.get(i).expect("past effective_start"))
                    .collect()
            })
            .collect();
        (dates, rows)
    }

    /// CSV with a `date` column and one column per indicator; warm-up
    /// cells are empty. Floats print in shortest round-trip form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("date");
        for col in &self.columns {
            out.push(',');
            out.push_str(col.name());
        }
        out.push('\n');
        for (i, date) in self.dates.iter().enumerate() {
            write!(out, "{date}").expect("string write");
            for col in &self.columns {
                out.push(',');
                if let Some(v) = col.get(i) {
                    write!(out, "{v}").expect("string write");
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }

    /// Reads a matrix written by [`FeatureMatrix::write_csv`], re-running
    /// full validation (warm-up prefix shape, finiteness, shared length).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let io = |e: csv::Error| Error::Csv { path: path.to_path_buf(), source: Box::new(e) };
        let mut reader = csv::ReaderBuilder::new().from_path(path).map_err(io)?;
        let headers = reader.headers().map_err(io)?.clone();
        if headers.is_empty() || headers.get(0) != Some("date") {
            return Err(Error::MissingColumn { column: "date".into() });
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut dates = Vec::new();
        let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); names.len()];
        for (row_idx, record) in reader.records().enumerate() {
            let record = record.map_err(io)?;
            let raw_date = record.get(0).unwrap_or("");
            let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|_| {
                Error::InvalidDate { raw: raw_date.to_string(), row: row_idx + 2 }
            })?;
            dates.push(date);
            for (c, cell) in cells.iter_mut().enumerate() {
                let raw = record.get(c + 1).unwrap_or("").trim();
                if raw.is_empty() {
                    cell.push(None);
                } else {
                    let v: f64 = raw.parse().map_err(|_| Error::NonFinite {
                        context: format!("cell `{raw}` in column `{}`", names[c]),
                    })?;
                    cell.push(Some(v));
                }
            }
        }
        let columns = names
            .into_iter()
            .zip(cells)
            .map(|(name, values)| column(name, values))
            .collect::<Result<Vec<_>>>()?;
        FeatureMatrix::new(dates, columns)
    }

    /// JSON object with explicit nulls for warm-up cells.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dates": self.dates.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
            "effective_start": self.effective_start,
            "columns": self.columns,
        })
    }
}

/// Computes every configured indicator over a cleaned series and assembles
/// the matrix in the documented column order, raw close last.
pub fn build_feature_matrix(series: &OhlcvSeries, config: &IndicatorConfig) -> Result<FeatureMatrix> {
    config.validate()?;
    let closes = series.closes();
    let mut columns = Vec::new();

    if config.include_log_returns {
        columns.push(log_returns(&closes)?);
    }
    if config.include_price_range {
        columns.push(price_range(series)?);
    }
    for &p in &config.sma_periods {
        columns.push(sma(&closes, p)?);
    }
    for &p in &config.ema_periods {
        columns.push(ema(&closes, p)?);
    }
    if let Some(p) = config.roc_period {
        columns.push(roc(&closes, p)?);
    }
    if let Some(p) = config.rsi_period {
        columns.push(rsi(&closes, p)?);
    }
    if let Some((fast, slow, signal)) = config.macd {
        let (line, sig, hist) = macd(&closes, fast, slow, signal)?;
        columns.extend([line, sig, hist]);
    }
    if let Some((k, d)) = config.stoch {
        let (k_col, d_col) = stochastic(series, k, d)?;
        columns.extend([k_col, d_col]);
    }
    if let Some(p) = config.atr_period {
        columns.push(atr(series, p)?);
    }
    if let Some(w) = config.vol_window {
        columns.push(rolling_volatility(&log_returns(&closes)?, w)?);
    }
    if let Some((p, mult)) = config.bollinger {
        let (mid, up, low) = bollinger(&closes, p, mult)?;
        columns.extend([mid, up, low]);
    }
    if config.include_force {
        columns.push(force_index(series)?);
    }
    if config.include_obv {
        columns.push(obv(series)?);
    }
    if let Some((p, scale)) = config.cci {
        columns.push(cci(series, p, scale)?);
    }
    columns.push(IndicatorColumn::new(
        "close",
        closes.iter().map(|c| Some(*c)).collect(),
        0,
    )?);

    FeatureMatrix::new(series.dates(), columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::OhlcvBar;

    fn series_from_closes(closes: &[f64]) -> OhlcvSeries {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let bars = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| OhlcvBar {
                date: start + chrono::Days::new(i as u64),
                open: c,
                high: c + 1.0,
                low: (c - 1.0).max(c / 2.0),
                close: c,
                volume: 100.0,
            })
            .collect();
        OhlcvSeries::new("test", bars).unwrap()
    }

    fn approx(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn log_returns_match_hand_values() {
        let col = log_returns(&[100.0, 100.0]).unwrap();
        assert_eq!(col.values(), &[None, Some(0.0)]);
        assert_eq!(col.warmup_len(), 1);

        let col = log_returns(&[100.0, 110.0]).unwrap();
        approx(col.get(1).unwrap(), 1.1f64.ln());

        let col = log_returns(&[100.0, 50.0, 100.0]).unwrap();
        approx(col.get(1).unwrap(), -(2.0f64.ln()));
        approx(col.get(2).unwrap(), 2.0f64.ln());

        assert!(log_returns(&[100.0, -1.0]).is_err());
        assert!(log_returns(&[100.0]).is_err());
    }

    #[test]
    fn price_range_is_scale_invariant() {
        let mut series = series_from_closes(&[10.0, 20.0]);
        let col = price_range(&series).unwrap();
        // Bar 0: high 11, low 9, close 10.
        approx(col.get(0).unwrap(), 0.2);

        // Doubling all prices leaves the ratio unchanged.
        let doubled: Vec<OhlcvBar> = series
            .bars()
            .iter()
            .map(|b| OhlcvBar {
                open: b.open * 2.0,
                high: b.high * 2.0,
                low: b.low * 2.0,
                close: b.close * 2.0,
                ..*b
            })
            .collect();
        series = OhlcvSeries::new("test", doubled).unwrap();
        let col2 = price_range(&series).unwrap();
        approx(col2.get(0).unwrap(), col.get(0).unwrap());
    }

    #[test]
    fn sma_hand_means_and_degenerate_window() {
        let col = sma(&[1.0, 2.0, 3.0, 4.0], 3).unwrap();
        assert_eq!(col.values(), &[None, None, Some(2.0), Some(3.0)]);
        assert_eq!(col.warmup_len(), 2);

        let id = sma(&[7.0, 8.0], 1).unwrap();
        assert_eq!(id.values(), &[Some(7.0), Some(8.0)]);

        assert!(sma(&[1.0], 3).is_err());
    }

    #[test]
    fn ema_hand_recursion_and_fixed_point() {
        let col = ema(&[2.0, 4.0, 8.0], 3).unwrap();
        assert_eq!(col.values(), &[Some(2.0), Some(3.0), Some(5.5)]);
        assert_eq!(col.warmup_len(), 0);

        let constant = ema(&[5.0; 10], 4).unwrap();
        assert!(constant.present().iter().all(|&v| v == 5.0));

        let id = ema(&[1.0, 9.0, 4.0], 1).unwrap();
        assert_eq!(id.values(), &[Some(1.0), Some(9.0), Some(4.0)]);
    }

    #[test]
    fn roc_hand_percentages() {
        let mut closes = vec![100.0; 11];
        closes[10] = 110.0;
        let col = roc(&closes, 10).unwrap();
        assert_eq!(col.warmup_len(), 10);
        approx(col.get(10).unwrap(), 10.0);

        closes[10] = 50.0;
        approx(roc(&closes, 10).unwrap().get(10).unwrap(), -50.0);

        let flat = roc(&[3.0; 5], 2).unwrap();
        assert!(flat.present().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rsi_saturates_and_centres() {
        let rising: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let col = rsi(&rising, 14).unwrap();
        assert!(col.present().iter().all(|&v| v == 100.0));

        let falling: Vec<f64> = (1..=20).rev().map(|i| i as f64).collect();
        let col = rsi(&falling, 14).unwrap();
        assert!(col.present().iter().all(|&v| v == 0.0));

        let flat = rsi(&[10.0; 20], 14).unwrap();
        assert!(flat.present().iter().all(|&v| v == 50.0));
        assert_eq!(flat.warmup_len(), 1);
    }

    #[test]
    fn macd_constant_series_is_zero_and_histogram_identity_holds() {
        let (line, signal, hist) = macd(&[42.0; 40], 12, 26, 9).unwrap();
        assert!(line.present().iter().all(|&v| v == 0.0));
        assert!(signal.present().iter().all(|&v| v == 0.0));
        assert!(hist.present().iter().all(|&v| v == 0.0));

        let closes: Vec<f64> = (0..60).map(|i| 100.0 + (i as f64 * 0.7).sin() * 5.0).collect();
        let (line, signal, hist) = macd(&closes, 12, 26, 9).unwrap();
        for t in 0..closes.len() {
            approx(hist.get(t).unwrap(), line.get(t).unwrap() - signal.get(t).unwrap());
        }
    }

    #[test]
    fn stochastic_extremes_and_midpoint() {
        // Closes never move, but per-bar high/low straddle them, so %K is
        // driven by where the close sits inside the window envelope.
        let rising: Vec<f64> = (1..=30).map(|i| i as f64 * 10.0).collect();
        let series = series_from_closes(&rising);
        let (k, d) = stochastic(&series, 14, 3).unwrap();
        assert_eq!(k.warmup_len(), 13);
        assert_eq!(d.warmup_len(), 15);
        // In a strongly rising series the close hugs the window high.
        assert!(k.present().iter().all(|&v| v > 90.0 && v <= 100.0));

        let falling: Vec<f64> = (1..=30).rev().map(|i| i as f64 * 10.0).collect();
        let (k, _) = stochastic(&series_from_closes(&falling), 14, 3).unwrap();
        assert!(k.present().iter().all(|&v| v >= 0.0 && v < 10.0));

        // Flat series: the envelope is [c-1, c+1] and the close sits at the
        // exact midpoint.
        let (k, d) = stochastic(&series_from_closes(&[50.0; 20]), 14, 3).unwrap();
        assert!(k.present().iter().all(|&v| v == 50.0));
        assert!(d.present().iter().all(|&v| v == 50.0));
    }

    #[test]
    fn atr_flat_and_hand_true_range() {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let flat: Vec<OhlcvBar> = (0..10)
            .map(|i| OhlcvBar {
                date: start + chrono::Days::new(i),
                open: 10.0,
                high: 10.0,
                low: 10.0,
                close: 10.0,
                volume: 1.0,
            })
            .collect();
        let col = atr(&OhlcvSeries::new("flat", flat).unwrap(), 14).unwrap();
        assert!(col.present().iter().all(|&v| v == 0.0));
        assert_eq!(col.warmup_len(), 1);

        // One step: H=10, L=8, previous close 9 -> TR = max(2, 1, 1) = 2,
        // and the seeded EMA starts at exactly that value.
        let bars = vec![
            OhlcvBar { date: start, open: 9.0, high: 9.0, low: 9.0, close: 9.0, volume: 1.0 },
            OhlcvBar {
                date: start + chrono::Days::new(1),
                open: 9.0,
                high: 10.0,
                low: 8.0,
                close: 9.0,
                volume: 1.0,
            },
        ];
        let col = atr(&OhlcvSeries::new("step", bars).unwrap(), 14).unwrap();
        approx(col.get(1).unwrap(), 2.0);
    }

    #[test]
    fn volatility_hand_case_and_homogeneity() {
        let returns = IndicatorColumn::new("logret", vec![None, Some(1.0), Some(-1.0)], 1).unwrap();
        let col = rolling_volatility(&returns, 2).unwrap();
        assert_eq!(col.warmup_len(), 2);
        approx(col.get(2).unwrap(), 1.0);

        let constant = IndicatorColumn::new("logret", vec![None, Some(0.3), Some(0.3), Some(0.3)], 1).unwrap();
        let col = rolling_volatility(&constant, 2).unwrap();
        assert!(col.present().iter().all(|&v| v == 0.0));

        let scaled = IndicatorColumn::new("logret", vec![None, Some(3.0), Some(-3.0)], 1).unwrap();
        let col3 = rolling_volatility(&scaled, 2).unwrap();
        approx(col3.get(2).unwrap(), 3.0);
    }

    #[test]
    fn bollinger_bands_bracket_the_middle() {
        let constant = vec![25.0; 25];
        let (mid, up, low) = bollinger(&constant, 20, 2.0).unwrap();
        assert_eq!(mid.warmup_len(), 19);
        for t in 19..25 {
            assert_eq!(mid.get(t), up.get(t));
            assert_eq!(mid.get(t), low.get(t));
        }

        let wavy: Vec<f64> = (0..40).map(|i| 100.0 + (i as f64).sin() * 3.0).collect();
        let (mid, up, low) = bollinger(&wavy, 20, 2.0).unwrap();
        for t in 19..40 {
            let (m, u, l) = (mid.get(t).unwrap(), up.get(t).unwrap(), low.get(t).unwrap());
            assert!(u >= m && m >= l);
            // upper - lower = 4 sigma = 2 * (upper - middle).
            approx(u - l, 2.0 * (u - m));
        }
    }

    #[test]
    fn force_index_hand_values() {
        let series = series_from_closes(&[10.0, 12.0, 12.0]);
        let col = force_index(&series).unwrap();
        assert_eq!(col.warmup_len(), 1);
        approx(col.get(1).unwrap(), 200.0);
        approx(col.get(2).unwrap(), 0.0);
    }

    #[test]
    fn obv_hand_recursion_with_equal_close_rule() {
        let series = series_from_closes(&[1.0, 2.0, 2.0, 1.0]);
        let col = obv(&series).unwrap();
        let vals: Vec<f64> = col.values().iter().map(|v| v.unwrap()).collect();
        assert_eq!(vals, vec![0.0, 100.0, 100.0, 0.0]);
        assert_eq!(col.warmup_len(), 0);

        let rising = series_from_closes(&[1.0, 2.0, 3.0]);
        let col = obv(&rising).unwrap();
        assert_eq!(col.get(2).unwrap(), 200.0);

        let flat = obv(&series_from_closes(&[5.0; 4])).unwrap();
        assert!(flat.values().iter().all(|v| *v == Some(0.0)));
    }

    #[test]
    fn cci_degenerate_conventions() {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let flat: Vec<OhlcvBar> = (0..25)
            .map(|i| OhlcvBar {
                date: start + chrono::Days::new(i),
                open: 10.0,
                high: 10.0,
                low: 10.0,
                close: 10.0,
                volume: 1.0,
            })
            .collect();
        let col = cci(&OhlcvSeries::new("flat", flat).unwrap(), 20, 0.015).unwrap();
        assert_eq!(col.warmup_len(), 19);
        assert!(col.present().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_matrix_shape_and_order() {
        let closes: Vec<f64> = (0..60).map(|i| 100.0 + (i as f64 * 0.3).sin() * 4.0).collect();
        let series = series_from_closes(&closes);
        let matrix = build_feature_matrix(&series, &IndicatorConfig::default()).unwrap();
        assert_eq!(matrix.effective_start(), 49);
        assert_eq!(matrix.len(), 60);
        let names = matrix.names();
        assert_eq!(names.first(), Some(&"logret"));
        assert_eq!(names.last(), Some(&"close"));
        assert_eq!(names.len(), 26);
        assert_eq!(
            names,
            vec![
                "logret", "range", "sma_5", "sma_10", "sma_20", "sma_50", "ema_5", "ema_10",
                "ema_20", "ema_50", "roc_10", "rsi_14", "macd", "macd_signal", "macd_hist",
                "stoch_k", "stoch_d", "atr_14", "vol_20", "bb_mid", "bb_up", "bb_low", "force",
                "obv", "cci_20", "close"
            ]
        );

        // Determinism: two runs produce identical matrices.
        let again = build_feature_matrix(&series, &IndicatorConfig::default()).unwrap();
        assert_eq!(matrix, again);
    }

    #[test]
    fn minimal_config_keeps_only_close() {
        let series = series_from_closes(&[10.0, 11.0, 12.0]);
        let matrix = build_feature_matrix(&series, &IndicatorConfig::minimal()).unwrap();
        assert_eq!(matrix.effective_start(), 0);
        assert_eq!(matrix.names(), vec!["close"]);
    }

    #[test]
    fn too_short_series_is_rejected() {
        let closes: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        let series = series_from_closes(&closes);
        assert!(matches!(
            build_feature_matrix(&series, &IndicatorConfig::default()),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn csv_round_trip_preserves_matrix() {
        let closes: Vec<f64> = (0..70).map(|i| 100.0 + (i as f64 * 0.19).cos() * 7.0).collect();
        let series = series_from_closes(&closes);
        let matrix = build_feature_matrix(&series, &IndicatorConfig::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        matrix.write_csv(&path).unwrap();
        let reread = FeatureMatrix::read_csv(&path).unwrap();
        assert_eq!(matrix, reread);
    }

    #[test]
    fn json_export_uses_explicit_nulls() {
        let series = series_from_closes(&[10.0, 11.0, 12.0, 13.0]);
        let mut config = IndicatorConfig::minimal();
        config.include_log_returns = true;
        let matrix = build_feature_matrix(&series, &config).unwrap();
        let json = matrix.to_json();
        let logret = &json["columns"][0];
        assert_eq!(logret["name"], "logret");
        assert!(logret["values"][0].is_null());
        assert!(logret["values"][1].is_number());
    }

    #[test]
    fn column_constructor_rejects_malformed_prefixes() {
        assert!(IndicatorColumn::new("x", vec![Some(1.0), None], 1).is_err());
        assert!(IndicatorColumn::new("x", vec![None, Some(f64::NAN)], 1).is_err());
        assert!(IndicatorColumn::new("x", vec![None, Some(1.0)], 2).is_err());
        assert!(IndicatorColumn::new("x", vec![None, Some(1.0)], 1).is_ok());
    }

    #[test]
    fn config_validation_catches_degenerate_values() {
        let mut config = IndicatorConfig::default();
        config.sma_periods = vec![5, 5];
        assert!(config.validate().is_err());

        let mut config = IndicatorConfig::default();
        config.bollinger = Some((20, 0.0));
        assert!(config.validate().is_err());

        let mut config = IndicatorConfig::default();
        config.roc_period = Some(0);
        assert!(config.validate().is_err());

        assert!(IndicatorConfig::default().validate().is_ok());
        assert!(IndicatorConfig::minimal().validate().is_ok());
    }
}
