//! Forecast quality metrics and reference baselines.
//!
//! Metrics score aligned actual/predicted price series: directional accuracy
//! (fraction of correctly called up/down/flat moves, both directions anchored
//! at the prior actual close), root mean squared error, the coefficient of
//! determination, and mean absolute percentage error. Baselines produce
//! next-day predictions over a chosen test range of the close series using
//! only values strictly before each index: trailing moving averages, the last
//! close, and an autoregression on the d-times differenced series fitted once
//! on the training range and rolled across the test range without refitting.
//!
//! [`evaluate_bundle`] scores a trained bundle: the ensemble and each member
//! predict over the bundle's held-out test windows, every baseline forecasts
//! exactly the same target rows, and one report per series lands in a single
//! table that exports to JSON, with the predictions behind it exported to CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::FeatureMatrix;
use crate::trainer::{make_windows, EnsemblePredictions, TrainedEnsemble};

/// Summary metrics over one aligned actual/predicted pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub directional_accuracy: f64,
    pub rmse: f64,
    pub r2: f64,
    pub mape: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn compute(actual: &[f64], predicted: &[f64]) -> Result<Self> {
        Ok(EvalReport {
            directional_accuracy: directional_accuracy(actual, predicted)?,
            rmse: rmse(actual, predicted)?,
            r2: r_squared(actual, predicted)?,
            mape: mape(actual, predicted)?,
            n: actual.len(),
        })
    }
}

/// Dated actual/predicted pair, validated to be aligned and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSeries {
    dates: Vec<NaiveDate>,
    actual: Vec<f64>,
    predicted: Vec<f64>,
}

impl PredictionSeries {
    pub fn new(dates: Vec<NaiveDate>, actual: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        if dates.len() != actual.len() || actual.len() != predicted.len() {
            return Err(Error::ShapeMismatch {
                op: "prediction series",
                detail: format!(
                    "{} dates, {} actual, {} predicted",
                    dates.len(),
                    actual.len(),
                    predicted.len()
                ),
            });
        }
        if actual.iter().chain(predicted.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "prediction series".into() });
        }
        Ok(PredictionSeries { dates, actual, predicted })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn actual(&self) -> &[f64] {
        &self.actual
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }

    pub fn report(&self) -> Result<EvalReport> {
        EvalReport::compute(&self.actual, &self.predicted)
    }
}

fn check_aligned(actual: &[f64], predicted: &[f64], what: &str, needed: usize) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            op: "metric input",
            detail: format!("{what}: {} actual vs {} predicted", actual.len(), predicted.len()),
        });
    }
    if actual.len() < needed {
        return Err(Error::TooShort { what: what.into(), needed, got: actual.len() });
    }
    if actual.iter().chain(predicted.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: format!("{what} input") });
    }
    Ok(())
}

fn direction(change: f64) -> i8 {
    if change > 0.0 {
        1
    } else if change < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of steps `t >= 1` where the predicted move `pred[t] - actual[t-1]`
/// has the same sign as the realized move `actual[t] - actual[t-1]`. A zero
/// move only counts as called when both sides are exactly zero.
pub fn directional_accuracy(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_aligned(actual, predicted, "directional accuracy", 2)?;
    let hits = (1..actual.len())
        .filter(|&t| {
            direction(predicted[t] - actual[t - 1]) == direction(actual[t] - actual[t - 1])
        })
        .count();
    Ok(hits as f64 / (actual.len() - 1) as f64)
}

/// Root mean squared error; invariant under translating both series.
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_aligned(actual, predicted, "rmse", 1)?;
    let ss: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok((ss / actual.len() as f64).sqrt())
}

/// Coefficient of determination `1 - SS_res / SS_tot`. Requires the actuals
/// to vary; a perfect fit scores 1 and predicting the mean scores 0.
pub fn r_squared(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_aligned(actual, predicted, "r-squared", 2)?;
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance { context: "r-squared actuals".into() });
    }
    let ss_res: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean absolute percentage error in percent; undefined when any actual is
/// zero. Invariant under rescaling both series by a common factor.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_aligned(actual, predicted, "mape", 1)?;
    let mut sum = 0.0;
    for (i, (a, p)) in actual.iter().zip(predicted).enumerate() {
        if *a == 0.0 {
            return Err(Error::ZeroActual { index: i });
        }
        sum += 100.0 * (a - p).abs() / a.abs();
    }
    Ok(sum / actual.len() as f64)
}

fn check_test_range(closes: &[f64], test: &Range<usize>) -> Result<()> {
    if test.start >= test.end || test.end > closes.len() {
        return Err(Error::BadConfig {
            detail: format!(
                "test range {}..{} invalid for a series of {} closes",
                test.start,
                test.end,
                closes.len()
            ),
        });
    }
    if let Some(i) = closes[..test.end].iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: format!("close series at row {i}") });
    }
    Ok(())
}

/// Predicts each test close as the mean of the `period` closes before it.
pub fn baseline_sma(closes: &[f64], test: Range<usize>, period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::BadConfig { detail: "sma baseline period 0".into() });
    }
    check_test_range(closes, &test)?;
    if test.start < period {
        return Err(Error::TooShort {
            what: "sma baseline history".into(),
            needed: period,
            got: test.start,
        });
    }
    Ok(test
        .map(|t| closes[t - period..t].iter().sum::<f64>() / period as f64)
        .collect())
}

/// Predicts each test close as the trailing exponential moving average of all
/// closes before it, seeded from the first close with `alpha = 2/(period+1)`
/// (the same recursion the indicator columns use).
pub fn baseline_ema(closes: &[f64], test: Range<usize>, period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::BadConfig { detail: "ema baseline period 0".into() });
    }
    check_test_range(closes, &test)?;
    if test.start == 0 {
        return Err(Error::TooShort { what: "ema baseline history".into(), needed: 1, got: 0 });
    }
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut state = closes[0];
    let mut out = Vec::with_capacity(test.len());
    for t in 1..test.end {
        // `state` summarizes closes[..t] here.
        if t >= test.start {
            out.push(state);
        }
        state = alpha * closes[t] + (1.0 - alpha) * state;
    }
    Ok(out)
}

/// Predicts each test close as the close immediately before it.
pub fn baseline_last_value(closes: &[f64], test: Range<usize>) -> Result<Vec<f64>> {
    check_test_range(closes, &test)?;
    if test.start == 0 {
        return Err(Error::TooShort {
            what: "last-value baseline history".into(),
            needed: 1,
            got: 0,
        });
    }
    Ok(test.map(|t| closes[t - 1]).collect())
}

/// Fits a zero-intercept AR(`order`) model to `series` by least squares,
/// returning one coefficient per lag (lag 1 first). An identically zero
/// system is fit exactly by the zero model; lags linearly dependent on
/// earlier ones (noiseless seasonal series produce them) get a zero
/// coefficient instead of poisoning the solve.
pub fn fit_ar(series: &[f64], order: usize) -> Result<Vec<f64>> {
    if order == 0 {
        return Ok(Vec::new());
    }
    if series.len() < order + 1 {
        return Err(Error::TooShort {
            what: "ar fit".into(),
            needed: order + 1,
            got: series.len(),
        });
    }
    let p = order;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for t in p..series.len() {
        for j in 0..p {
            b[j] += series[t] * series[t - 1 - j];
            for k in j..p {
                a[j * p + k] += series[t - 1 - j] * series[t - 1 - k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[j * p + k] = a[k * p + j];
        }
    }
    if a.iter().chain(b.iter()).all(|&v| v == 0.0) {
        return Ok(vec![0.0; p]);
    }
    solve_normal_equations(a, b, p)
        .ok_or_else(|| Error::SingularSystem { context: format!("ar({p}) normal equations") })
}

// Elimination specialized to the symmetric positive semidefinite Gram matrix
// of the lag vectors: pivoting on the largest remaining diagonal entry is
// rank-revealing there. A diagonal below the relative tolerance marks a lag
// dependent on those already processed; its coefficient is pinned to zero and
// its row dropped, which leaves the fitted span unchanged. None only on a
// non-finite solution.
fn solve_normal_equations(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let tol = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max) * 1e-12;
    let mut rank = n;
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| {
            a[r * n + r].partial_cmp(&a[s * n + s]).expect("finite diagonals")
        })?;
        if a[pivot * n + pivot] <= tol {
            rank = col;
            break;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(pivot * n + c, col * n + c);
            }
            for r in 0..n {
                a.swap(r * n + pivot, r * n + col);
            }
            b.swap(pivot, col);
            perm.swap(pivot, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..rank).rev() {
        let tail: f64 = (row + 1..rank).map(|c| a[row * n + c] * x[perm[c]]).sum();
        x[perm[row]] = (b[row] - tail) / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// One-step-ahead forecasts over `test` from an AR(`p`) model fitted once on
/// the `d`-times differenced closes of the `fit` range. Rolling uses the
/// actual differenced history at every step (no refit, no feedback), and the
/// differencing is inverted by adding back the trailing partial sums, so
/// `p = 0, d = 1` reduces to the last-value baseline.
pub fn baseline_ar(
    closes: &[f64],
    fit: Range<usize>,
    test: Range<usize>,
    p: usize,
    d: usize,
) -> Result<Vec<f64>> {
    check_test_range(closes, &test)?;
    if fit.start > fit.end || fit.end > test.start {
        return Err(Error::BadConfig {
            detail: format!(
                "ar fit range {}..{} must precede test range starting at {}",
                fit.start, fit.end, test.start
            ),
        });
    }
    let needed = (10 * p).max(1) + d;
    if fit.len() < needed {
        return Err(Error::TooShort {
            what: format!("ar({p},{d}) baseline fit range"),
            needed,
            got: fit.len(),
        });
    }

    // levels[j][i] is the j-th difference at index i, valid for i >= j.
    let n = test.end;
    let mut levels: Vec<Vec<f64>> = vec![closes[..n].to_vec()];
    for j in 1..=d {
        let prev = &levels[j - 1];
        let mut next = vec![0.0; n];
        for i in j..n {
            next[i] = prev[i] - prev[i - 1];
        }
        levels.push(next);
    }

    let diffed_fit = &levels[d][fit.start + d..fit.end];
    let coeffs = fit_ar(diffed_fit, p)?;

    let z = &levels[d];
    let mut out = Vec::with_capacity(test.len());
    for t in test {
        let step: f64 = coeffs.iter().enumerate().map(|(k, c)| c * z[t - 1 - k]).sum();
        let carried: f64 = levels[..d].iter().map(|level| level[t - 1]).sum();
        let pred = carried + step;
        if !pred.is_finite() {
            return Err(Error::NonFinite { context: format!("ar baseline forecast at row {t}") });
        }
        out.push(pred);
    }
    Ok(out)
}

/// Baseline settings reported alongside the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub sma_period: usize,
    pub ema_period: usize,
    pub ar_order: usize,
    pub ar_differences: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { sma_period: 10, ema_period: 10, ar_order: 5, ar_differences: 1 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sma_period == 0 || self.ema_period == 0 {
            return Err(Error::BadConfig {
                detail: "baseline averaging periods must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Report key of the autoregressive baseline, e.g. `ari(5,1)`.
    pub fn ar_label(&self) -> String {
        format!("ari({},{})", self.ar_order, self.ar_differences)
    }
}

/// One scoring pass over a bundle's test range: a metric report per series
/// (ensemble, members, baselines) plus the predictions behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: BTreeMap<String, EvalReport>,
    pub series: PredictionSeries,
    pub members: EnsemblePredictions,
}

/// Scores a trained bundle on its held-out test range and pits it against
/// the reference baselines over exactly the same target rows.
///
/// The matrix must be the one the bundle was trained on: same columns in the
/// same order and the same row count as the recorded split. Members predict
/// in scaled space and are unscaled to prices before any metric sees them;
/// the autoregressive baseline is fitted strictly before the test split.
pub fn evaluate_bundle(
    trained: &TrainedEnsemble,
    matrix: &FeatureMatrix,
    baselines: &BaselineConfig,
) -> Result<Evaluation> {
    baselines.validate()?;
    trained.scaler.ensure_names(&matrix.names())?;
    let (dates, rows) = matrix.dense_rows();
    let split = &trained.split;
    if split.total_rows() != rows.len() {
        return Err(Error::SchemaMismatch {
            detail: format!(
                "bundle split covers {} rows, matrix has {}",
                split.total_rows(),
                rows.len()
            ),
        });
    }

    let seq = trained.config.sequence_length;
    let set = make_windows(&rows, &trained.scaler, split.test.clone(), seq)?;
    let members = trained.predict_set(&set)?;

    // Baselines forecast the same contiguous target rows the windows do.
    let target_rows = set.target_rows();
    let targets = target_rows[0]..target_rows[target_rows.len() - 1] + 1;
    let close = trained.scaler.close_index();
    let closes: Vec<f64> = rows.iter().map(|row| row[close]).collect();
    let actual = closes[targets.clone()].to_vec();
    let target_dates = dates[targets.clone()].to_vec();

    let baseline_series = [
        ("sma".to_string(), baseline_sma(&closes, targets.clone(), baselines.sma_period)?),
        ("ema".to_string(), baseline_ema(&closes, targets.clone(), baselines.ema_period)?),
        ("last_value".to_string(), baseline_last_value(&closes, targets.clone())?),
        (
            baselines.ar_label(),
            baseline_ar(
                &closes,
                0..split.test.start,
                targets,
                baselines.ar_order,
                baselines.ar_differences,
            )?,
        ),
    ];

    let mut reports = BTreeMap::new();
    reports.insert("ensemble".to_string(), EvalReport::compute(&actual, &members.ensemble)?);
    reports.insert("vae".to_string(), EvalReport::compute(&actual, &members.vae)?);
    reports.insert("transformer".to_string(), EvalReport::compute(&actual, &members.transformer)?);
    reports.insert("lstm".to_string(), EvalReport::compute(&actual, &members.lstm)?);
    for (key, predicted) in baseline_series {
        reports.insert(key, EvalReport::compute(&actual, &predicted)?);
    }

    let series = PredictionSeries::new(target_dates, actual, members.ensemble.clone())?;
    Ok(Evaluation { reports, series, members })
}

impl Evaluation {
    /// Writes the metric table as pretty-printed JSON with sorted keys.
    pub fn write_report_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.reports)
            .map_err(|e| Error::BadConfig { detail: format!("report serialization: {e}") })?;
        std::fs::write(path, json + "\n")
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }

    /// Writes the dated test predictions, one column per model.
    pub fn write_predictions_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("date,actual,vae,transformer,lstm,ensemble\n");
        for (i, date) in self.series.dates().iter().enumerate() {
            writeln!(
                out,
                "{date},{},{},{},{},{}",
                self.series.actual()[i],
                self.members.vae[i],
                self.members.transformer[i],
                self.members.lstm[i],
                self.members.ensemble[i],
            )
            .expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }

    /// Writes actual/predicted pairs of the ensemble for scatter plotting.
    pub fn write_scatter_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("actual,predicted\n");
        for (a, p) in self.series.actual().iter().zip(self.series.predicted()) {
            writeln!(out, "{a},{p}").expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }
}
