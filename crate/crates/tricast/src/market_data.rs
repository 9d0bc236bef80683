//! OHLCV ingestion, repair, and trading-calendar alignment.
//!
//! Parsing is deliberately forgiving: any numeric cell that fails to parse
//! is recorded as missing rather than dropping the row, and rows whose date
//! cell is unreadable are skipped (erroring only when nothing parseable
//! remains). Repair then proceeds in a fixed order: fill missing cells,
//! treat close-price outliers, drop weekend bars. Bar invariants are
//! enforced when the raw series is promoted to a clean one, so everything
//! downstream can assume complete, positive, well-ordered bars.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One bar as parsed from disk; numeric cells may be missing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBar {
    pub date: NaiveDate,
    pub open: Option<f64>,
    pub high: Option<f64>,
    pub low: Option<f64>,
    pub close: Option<f64>,
    pub volume: Option<f64>,
}

/// Parsed but not yet repaired series: sorted, duplicate-free dates, with
/// possibly missing cells. Produced by [`parse_ohlcv_csv`], consumed by
/// [`fill_missing`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub symbol: String,
    pub bars: Vec<RawBar>,
}

/// One complete, validated bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhlcvBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvBar {
    /// Checks price positivity, high/low ordering, and volume sign.
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Error::BarInvariant { date: self.date, detail };
        for (name, v) in [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(fail(format!("{name} = {v} is not a positive price")));
            }
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err(fail(format!("volume = {} is negative", self.volume)));
        }
        if self.low > self.high {
            return Err(fail(format!("low {} above high {}", self.low, self.high)));
        }
        for (name, v) in [("open", self.open), ("close", self.close)] {
            if v < self.low || v > self.high {
                return Err(fail(format!(
                    "{name} {} outside [{}, {}]",
                    v, self.low, self.high
                )));
            }
        }
        Ok(())
    }
}

/// Complete, validated, strictly date-ordered series.
#[derive(Debug, Clone, PartialEq)]
pub struct OhlcvSeries {
    symbol: String,
    bars: Vec<OhlcvBar>,
}

impl OhlcvSeries {
    /// Validates every bar and the date ordering.
    pub fn new(symbol: impl Into<String>, bars: Vec<OhlcvBar>) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::NoRows { what: "series".into() });
        }
        for bar in &bars {
            bar.validate()?;
        }
        for pair in bars.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(Error::DuplicateDate { date: pair[1].date });
            }
        }
        Ok(OhlcvSeries { symbol: symbol.into(), bars })
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn bars(&self) -> &[OhlcvBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.bars.iter().map(|b| b.date).collect()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    /// Serializes back to the ingestion schema. Floats print in shortest
    /// round-trip form, so parse → write → parse is lossless.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("Date,Open,High,Low,Close,Volume\n");
        for b in &self.bars {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                b.date, b.open, b.high, b.low, b.close, b.volume
            )
            .expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }
}

/// Per-stage account of what the repair steps changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub missing_filled: usize,
    pub outliers_treated: usize,
    pub rows_dropped: usize,
    pub method_notes: Vec<String>,
}

impl CleaningReport {
    pub fn merge(&mut self, other: CleaningReport) {
        self.missing_filled += other.missing_filled;
        self.outliers_treated += other.outliers_treated;
        self.rows_dropped += other.rows_dropped;
        self.method_notes.extend(other.method_notes);
    }
}

/// How [`fill_missing`] bridges gaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillMethod {
    #[default]
    Linear,
    ForwardFill,
}

/// Reads a CSV with header `Date,Open,High,Low,Close,Volume` (any casing,
/// extra columns ignored, ISO-8601 dates). Unparseable numeric cells become
/// missing values; rows with unreadable dates are skipped. Bars come back
/// sorted by date; duplicate dates are an error. The symbol is the file
/// stem.
pub fn parse_ohlcv_csv(path: &Path) -> Result<RawSeries> {
    let io = |e: csv::Error| Error::Csv { path: path.to_path_buf(), source: Box::new(e) };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| {
            if e.is_io_error() {
                match e.into_kind() {
                    csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
                    _ => unreachable!("is_io_error guarantees an Io kind"),
                }
            } else {
                io(e)
            }
        })?;

    let headers = reader.headers().map_err(io)?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };
    let idx = [
        find("Date")?,
        find("Open")?,
        find("High")?,
        find("Low")?,
        find("Close")?,
        find("Volume")?,
    ];

    let mut bars = Vec::new();
    for record in reader.records() {
        let record = record.map_err(io)?;
        let cell = |i: usize| record.get(idx[i]).unwrap_or("").trim();
        let Ok(date) = NaiveDate::parse_from_str(cell(0), "%Y-%m-%d") else {
            continue;
        };
        let num = |i: usize| -> Option<f64> { cell(i).parse::<f64>().ok().filter(|v| v.is_finite()) };
        bars.push(RawBar {
            date,
            open: num(1),
            high: num(2),
            low: num(3),
            close: num(4),
            volume: num(5),
        });
    }
    if bars.is_empty() {
        return Err(Error::NoRows { what: format!("parseable rows in {}", path.display()) });
    }
    bars.sort_by_key(|b| b.date);
    for pair in bars.windows(2) {
        if pair[1].date == pair[0].date {
            return Err(Error::DuplicateDate { date: pair[1].date });
        }
    }
    let symbol = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".to_string());
    Ok(RawSeries { symbol, bars })
}

/// Replaces every missing cell and promotes the series to a validated one.
///
/// Linear interpolates between the nearest present neighbours of each gap
/// and extends the nearest present value at the edges. Forward fill carries
/// the previous value and requires a complete first bar; missing volume is
/// filled with 0 there, since volume is a flow rather than a level. A
/// column with no present value at all is unrecoverable.
pub fn fill_missing(series: &RawSeries, method: FillMethod) -> Result<(OhlcvSeries, CleaningReport)> {
    if series.bars.is_empty() {
        return Err(Error::NoRows { what: "series to fill".into() });
    }
    let mut report = CleaningReport::default();

    let columns: [(&'static str, Box<dyn Fn(&RawBar) -> Option<f64>>); 5] = [
        ("open", Box::new(|b| b.open)),
        ("high", Box::new(|b| b.high)),
        ("low", Box::new(|b| b.low)),
        ("close", Box::new(|b| b.close)),
        ("volume", Box::new(|b| b.volume)),
    ];

    let mut filled: Vec<Vec<f64>> = Vec::with_capacity(5);
    for (name, get) in &columns {
        let raw: Vec<Option<f64>> = series.bars.iter().map(|b| get(b)).collect();
        let missing = raw.iter().filter(|v| v.is_none()).count();
        if missing == raw.len() {
            return Err(Error::AllMissing { column: name });
        }
        let values = match method {
            FillMethod::Linear => fill_linear(&raw),
            FillMethod::ForwardFill => {
                if raw[0].is_none() {
                    return Err(Error::LeadingMissing { column: name });
                }
                if *name == "volume" {
                    raw.iter().map(|v| v.unwrap_or(0.0)).collect()
                } else {
                    fill_forward(&raw)
                }
            }
        };
        report.missing_filled += missing;
        filled.push(values);
    }
    if report.missing_filled > 0 {
        let how = match method {
            FillMethod::Linear => "linear interpolation (edges extend the nearest value)",
            FillMethod::ForwardFill => "forward fill (missing volume set to 0)",
        };
        report
            .method_notes
            .push(format!("filled {} missing cells via {}", report.missing_filled, how));
    }

    let bars: Vec<OhlcvBar> = series
        .bars
        .iter()
        .enumerate()
        .map(|(i, b)| OhlcvBar {
            date: b.date,
            open: filled[0][i],
            high: filled[1][i],
            low: filled[2][i],
            close: filled[3][i],
            volume: filled[4][i],
        })
        .collect();
    Ok((OhlcvSeries::new(series.symbol.clone(), bars)?, report))
}

fn fill_linear(raw: &[Option<f64>]) -> Vec<f64> {
    let present: Vec<(usize, f64)> =
        raw.iter().enumerate().filter_map(|(i, v)| v.map(|x| (i, x))).collect();
    raw.iter()
        .enumerate()
        .map(|(i, v)| {
            if let Some(x) = v {
                return *x;
            }
            let after = present.iter().find(|(j, _)| *j > i);
            let before = present.iter().rev().find(|(j, _)| *j < i);
            match (before, after) {
                (Some(&(j0, v0)), Some(&(j1, v1))) => {
                    let t = (i - j0) as f64 / (j1 - j0) as f64;
                    v0 + t * (v1 - v0)
                }
                (Some(&(_, v0)), None) => v0,
                (None, Some(&(_, v1))) => v1,
                (None, None) => unreachable!("all-missing checked by caller"),
            }
        })
        .collect()
}

fn fill_forward(raw: &[Option<f64>]) -> Vec<f64> {
    let mut last = raw[0].expect("leading value checked by caller");
    raw.iter()
        .map(|v| {
            if let Some(x) = v {
                last = *x;
            }
            last
        })
        .collect()
}

/// Replaces close-price outliers by a local median.
///
/// A close is an outlier when its absolute z-score against the full-series
/// mean and population standard deviation of closes reaches `z_threshold`.
/// Statistics and the replacement medians (5-bar centred windows, truncated
/// at the edges) are all taken from the incoming series, so the result does
/// not depend on treatment order. High/low are widened where needed to keep
/// the replaced close inside the bar.
pub fn treat_outliers(
    series: &OhlcvSeries,
    z_threshold: f64,
) -> Result<(OhlcvSeries, CleaningReport)> {
    if series.len() < 3 {
        return Err(Error::TooShort { what: "outlier treatment".into(), needed: 3, got: series.len() });
    }
    if z_threshold.is_nan() || z_threshold <= 0.0 {
        return Err(Error::BadConfig { detail: format!("z threshold {z_threshold} must be positive") });
    }
    let closes = series.closes();
    let n = closes.len() as f64;
    let mean = closes.iter().sum::<f64>() / n;
    let var = closes.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    let std = var.sqrt();

    let mut report = CleaningReport::default();
    if std == 0.0 {
        if closes.iter().any(|c| *c != mean) {
            return Err(Error::ZeroVariance { context: "outlier z-score of non-constant closes".into() });
        }
        return Ok((series.clone(), report));
    }

    let mut bars = series.bars.clone();
    let mut widened = 0usize;
    for i in 0..bars.len() {
        let z = (closes[i] - mean) / std;
        if z.abs() < z_threshold {
            continue;
        }
        let lo = i.saturating_sub(2);
        let hi = (i + 3).min(closes.len());
        let replacement = median(&closes[lo..hi]);
        bars[i].close = replacement;
        if replacement < bars[i].low {
            bars[i].low = replacement;
            widened += 1;
        }
        if replacement > bars[i].high {
            bars[i].high = replacement;
            widened += 1;
        }
        report.outliers_treated += 1;
    }
    if report.outliers_treated > 0 {
        report.method_notes.push(format!(
            "replaced {} outlier closes (|z| >= {}) with 5-bar centred medians",
            report.outliers_treated, z_threshold
        ));
    }
    if widened > 0 {
        report
            .method_notes
            .push(format!("widened high/low on {widened} bars to contain replaced closes"));
    }
    Ok((OhlcvSeries::new(series.symbol.clone(), bars)?, report))
}

fn median(window: &[f64]) -> f64 {
    let mut sorted = window.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite closes"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Drops Saturday and Sunday bars. Gaps between the remaining dates are
/// allowed; exchange holidays are not enumerated.
pub fn align_calendar(series: &OhlcvSeries) -> Result<(OhlcvSeries, CleaningReport)> {
    let mut report = CleaningReport::default();
    let bars: Vec<OhlcvBar> = series
        .bars
        .iter()
        .filter(|b| !matches!(b.date.weekday(), Weekday::Sat | Weekday::Sun))
        .copied()
        .collect();
    report.rows_dropped = series.len() - bars.len();
    if report.rows_dropped > 0 {
        report
            .method_notes
            .push(format!("dropped {} weekend bars", report.rows_dropped));
    }
    Ok((OhlcvSeries::new(series.symbol.clone(), bars)?, report))
}

/// Full repair pipeline in fixed order: fill missing cells, treat close
/// outliers, drop weekend bars. Reports merge in that order.
pub fn clean(
    series: &RawSeries,
    method: FillMethod,
    z_threshold: f64,
) -> Result<(OhlcvSeries, CleaningReport)> {
    let (filled, mut report) = fill_missing(series, method)?;
    let (treated, outlier_report) = treat_outliers(&filled, z_threshold)?;
    report.merge(outlier_report);
    let (aligned, calendar_report) = align_calendar(&treated)?;
    report.merge(calendar_report);
    Ok((aligned, report))
}
