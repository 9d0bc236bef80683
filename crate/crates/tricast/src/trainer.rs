//! Supervised training pipeline over the dense feature rows: chronological
//! splits, scaling fitted on the train range only, sliding-window batching,
//! early-stopped Adam loops, and ensemble coordination.
//!
//! The three member models train concurrently on separate threads over the
//! same read-only window sets. Ensemble weights never feed back into member
//! gradients, so the coordinator can merge the per-model logs after the
//! threads join and replay the re-weighting schedule deterministically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::{self, EnsembleWeights, PerformanceWindow};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::indicators::FeatureMatrix;
use crate::models::{
    collect_grads, Forecaster, LstmConfig, LstmModel, TransformerConfig, TransformerModel,
    VaeConfig, VaeModel, WindowBatch,
};
use crate::tensor::checkpoint;
use crate::tensor::optim::{clip_global_norm, Adam};
use crate::tensor::rng::RngStream;
use crate::tensor::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Chronological train/validation/test fractions.
pub const SPLIT_PROPORTIONS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// Master seed behind the default per-model seeds, so a bare run is
/// reproducible without any configuration.
pub const DEFAULT_MASTER_SEED: u64 = 42;

/// Contiguous, disjoint row ranges covering all dense feature rows in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl DatasetSplit {
    pub fn total_rows(&self) -> usize {
        self.test.end
    }
}

/// Partitions `rows` chronologically by the given fractions, flooring each
/// count and assigning the remainder to the test range.
pub fn make_splits(
    rows: usize,
    sequence_length: usize,
    proportions: (f64, f64, f64),
) -> Result<DatasetSplit> {
    let (p_train, p_val, p_test) = proportions;
    let parts = [p_train, p_val, p_test];
    if parts.iter().any(|p| !p.is_finite() || *p <= 0.0)
        || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::BadConfig {
            detail: format!("split proportions {parts:?} must be positive and sum to 1"),
        });
    }
    if rows < sequence_length + 3 {
        return Err(Error::TooShort {
            what: "post-warm-up rows".into(),
            needed: sequence_length + 3,
            got: rows,
        });
    }
    // The nudge absorbs representation error in products like 100 * 0.7,
    // which must floor to 70, not 69.
    let train_len = (rows as f64 * p_train + 1e-9).floor() as usize;
    let val_len = (rows as f64 * p_val + 1e-9).floor() as usize;
    Ok(DatasetSplit {
        train: 0..train_len,
        validation: train_len..train_len + val_len,
        test: train_len + val_len..rows,
    })
}

/// Per-feature affine map fitted on the training range only: each feature's
/// train min/max goes to [-1, 1], a constant feature goes to identically 0,
/// and values outside the fit range extrapolate unclipped. The close column
/// doubles as the prediction target's scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    names: Vec<String>,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    close_index: usize,
}

impl FeatureScaler {
    pub fn fit(names: &[String], rows: &[Vec<f64>], train: &Range<usize>) -> Result<Self> {
        if train.start >= train.end || train.end > rows.len() {
            return Err(Error::BadConfig {
                detail: format!(
                    "train range {}..{} invalid for {} feature rows",
                    train.start,
                    train.end,
                    rows.len()
                ),
            });
        }
        let close_index = names
            .iter()
            .position(|n| n == "close")
            .ok_or_else(|| Error::MissingColumn { column: "close".into() })?;
        let mut mins = vec![f64::INFINITY; names.len()];
        let mut maxs = vec![f64::NEG_INFINITY; names.len()];
        for (r, row) in rows.iter().enumerate().take(train.end).skip(train.start) {
            if row.len() != names.len() {
                return Err(Error::ShapeMismatch {
                    op: "scaler fit",
                    detail: format!("row {r} has {} values for {} features", row.len(), names.len()),
                });
            }
            for (f, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("feature `{}` at row {r}", names[f]),
                    });
                }
                mins[f] = mins[f].min(v);
                maxs[f] = maxs[f].max(v);
            }
        }
        for (f, name) in names.iter().enumerate() {
            if mins[f] == maxs[f] {
                log::warn!("feature `{name}` is constant over the training range; scaling it to 0");
            }
        }
        Ok(FeatureScaler { names: names.to_vec(), mins, maxs, close_index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn features(&self) -> usize {
        self.names.len()
    }

    pub fn close_index(&self) -> usize {
        self.close_index
    }

    /// Checks that a feature matrix carries exactly the fitted columns.
    pub fn ensure_names(&self, names: &[&str]) -> Result<()> {
        if self.names.len() != names.len() || self.names.iter().zip(names).any(|(a, b)| a != b) {
            return Err(Error::SchemaMismatch {
                detail: format!(
                    "fitted columns [{}], matrix columns [{}]",
                    self.names.join(", "),
                    names.join(", ")
                ),
            });
        }
        Ok(())
    }

    pub fn scale_value(&self, feature: usize, value: f64) -> f64 {
        let (lo, hi) = (self.mins[feature], self.maxs[feature]);
        if lo == hi {
            0.0
        } else {
            -1.0 + 2.0 * (value - lo) / (hi - lo)
        }
    }

    pub fn unscale_value(&self, feature: usize, scaled: f64) -> f64 {
        let (lo, hi) = (self.mins[feature], self.maxs[feature]);
        if lo == hi {
            lo
        } else {
            lo + (scaled + 1.0) / 2.0 * (hi - lo)
        }
    }

    pub fn scale_target(&self, price: f64) -> f64 {
        self.scale_value(self.close_index, price)
    }

    pub fn unscale_target(&self, scaled: f64) -> f64 {
        self.unscale_value(self.close_index, scaled)
    }

    fn scale_row_into(&self, row: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if row.len() != self.names.len() {
            return Err(Error::ShapeMismatch {
                op: "scale row",
                detail: format!("{} values for {} features", row.len(), self.names.len()),
            });
        }
        out.extend(row.iter().enumerate().map(|(f, &v)| self.scale_value(f, v)));
        Ok(())
    }
}

/// All supervised pairs for one contiguous row range: window `i` covers the
/// `seq_len` scaled rows starting at local offset `i`, and its target is the
/// scaled close of the row immediately after the window. Nothing references
/// rows outside the range, so windows never cross a split boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    scaled: Vec<f64>,
    features: usize,
    seq_len: usize,
    start_row: usize,
    targets: Vec<f64>,
    target_rows: Vec<usize>,
}

/// Scales one row range and carves it into supervised windows; a range of
/// length `L` yields exactly `L - sequence_length` pairs.
pub fn make_windows(
    rows: &[Vec<f64>],
    scaler: &FeatureScaler,
    range: Range<usize>,
    sequence_length: usize,
) -> Result<WindowSet> {
    if sequence_length == 0 {
        return Err(Error::BadConfig { detail: "sequence length 0".into() });
    }
    if range.end > rows.len() || range.start > range.end {
        return Err(Error::BadConfig {
            detail: format!(
                "window range {}..{} invalid for {} feature rows",
                range.start,
                range.end,
                rows.len()
            ),
        });
    }
    if range.len() < sequence_length + 1 {
        return Err(Error::TooShort {
            what: "window range".into(),
            needed: sequence_length + 1,
            got: range.len(),
        });
    }
    let features = scaler.features();
    let mut scaled = Vec::with_capacity(range.len() * features);
    for row in &rows[range.clone()] {
        scaler.scale_row_into(row, &mut scaled)?;
    }
    let count = range.len() - sequence_length;
    let mut targets = Vec::with_capacity(count);
    let mut target_rows = Vec::with_capacity(count);
    for i in 0..count {
        let row = range.start + i + sequence_length;
        target_rows.push(row);
        targets.push(scaler.scale_target(rows[row][scaler.close_index()]));
    }
    Ok(WindowSet {
        scaled,
        features,
        seq_len: sequence_length,
        start_row: range.start,
        targets,
        target_rows,
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn start_row(&self) -> usize {
        self.start_row
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Absolute dense-row index of each window's target.
    pub fn target_rows(&self) -> &[usize] {
        &self.target_rows
    }

    /// Gathers the given windows into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<WindowBatch> {
        let stride = self.features;
        let mut inputs = Vec::with_capacity(indices.len() * self.seq_len * stride);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::ShapeMismatch {
                    op: "window batch",
                    detail: format!("window {i} out of {}", self.len()),
                });
            }
            inputs.extend_from_slice(&self.scaled[i * stride..(i + self.seq_len) * stride]);
            targets.push(self.targets[i]);
        }
        WindowBatch::new(indices.len(), self.seq_len, self.features, inputs, targets)
    }
}

/// Index ranges over a window ordering, `batch_size` at a time with a short
/// final batch. A final batch of one instead borrows a window from its
/// predecessor, or merges into it when borrowing would leave the predecessor
/// with one window, keeping batch statistics defined in training mode.
pub fn batch_plan(count: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut plan = Vec::new();
    let mut start = 0;
    while start < count {
        let end = (start + batch_size).min(count);
        plan.push(start..end);
        start = end;
    }
    let n = plan.len();
    if n >= 2 && plan[n - 1].len() == 1 {
        if plan[n - 2].len() >= 3 {
            let boundary = plan[n - 1].start - 1;
            plan[n - 2].end = boundary;
            plan[n - 1].start = boundary;
        } else {
            // A two-row donor cannot spare a row, so absorb the tail instead.
            let tail = plan.pop().expect("plan has at least two chunks");
            plan[n - 2].end = tail.end;
        }
    }
    plan
}

/// Per-model seeds; deriving them from one master seed keeps the members'
/// entropy streams disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSeeds {
    pub vae: u64,
    pub transformer: u64,
    pub lstm: u64,
}

impl ModelSeeds {
    pub fn from_master(seed: u64) -> Self {
        let base = RngStream::from_seed(seed);
        ModelSeeds {
            vae: base.derive("vae").seed(),
            transformer: base.derive("transformer").seed(),
            lstm: base.derive("lstm").seed(),
        }
    }
}

impl Default for ModelSeeds {
    fn default() -> Self {
        ModelSeeds::from_master(DEFAULT_MASTER_SEED)
    }
}

/// Everything the training protocol needs; the defaults reproduce the
/// standard configuration (60-step windows, batches of 64, up to 300 epochs
/// with patience 30).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sequence_length: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seeds: ModelSeeds,
    /// Re-weight the ensemble every this many epochs; `None` freezes the
    /// initial weights.
    pub reweight_cadence: Option<usize>,
    pub vae: VaeConfig,
    pub transformer: TransformerConfig,
    pub lstm: LstmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sequence_length: 60,
            batch_size: 64,
            max_epochs: 300,
            patience: 30,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            seeds: ModelSeeds::default(),
            reweight_cadence: Some(ensemble::REWEIGHT_CADENCE),
            vae: VaeConfig::default(),
            transformer: TransformerConfig::default(),
            lstm: LstmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("sequence_length", self.sequence_length),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::BadConfig { detail: format!("{name} must be at least 1") });
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::BadConfig {
                detail: format!(
                    "patience {} exceeds max_epochs {}",
                    self.patience, self.max_epochs
                ),
            });
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::BadConfig {
                detail: format!("learning rate {} must be positive", self.learning_rate),
            });
        }
        if !self.grad_clip.is_finite() || self.grad_clip <= 0.0 {
            return Err(Error::BadConfig {
                detail: format!("gradient clip {} must be positive", self.grad_clip),
            });
        }
        if self.reweight_cadence == Some(0) {
            return Err(Error::BadConfig { detail: "reweight cadence must be at least 1".into() });
        }
        self.vae.validate()?;
        self.transformer.validate()?;
        self.lstm.validate()
    }
}

/// One epoch of one model's run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation MAPE on unscaled prices, the re-weighting signal.
    pub val_mape: f64,
    pub wall_secs: f64,
}

/// Complete early-stopped run of one model; epochs are consecutive from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub model: String,
    pub stats: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl ModelRun {
    pub fn epochs_run(&self) -> usize {
        self.stats.len()
    }
}

/// One merged log row; `weights` is the ensemble state in effect after this
/// epoch's re-weighting (if any).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub model: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub weights: EnsembleWeights,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

/// Merged per-epoch history of all members plus the weight trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    records: Vec<EpochRecord>,
    summaries: Vec<ModelSummary>,
}

impl TrainingLog {
    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn summaries(&self) -> &[ModelSummary] {
        &self.summaries
    }

    /// Columns: epoch, model, train_loss, val_loss, w1, w2, w3. Floats print
    /// in shortest round-trip form, so identical runs export identical bytes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,model,train_loss,val_loss,w1,w2,w3\n");
        for r in &self.records {
            let [w1, w2, w3] = r.weights.as_array();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.model, r.train_loss, r.val_loss, w1, w2, w3
            )
            .expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::Io { path: path.into(), source: e })
    }
}

fn snapshot(model: &dyn Forecaster) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    for (name, tensor) in model.params() {
        map.insert(name, tensor.clone());
    }
    for (name, tensor) in model.buffers() {
        map.insert(name, tensor);
    }
    map
}

fn infer_pass<M: Forecaster + ?Sized>(
    model: &mut M,
    set: &WindowSet,
    plan: &[Range<usize>],
) -> Result<(f64, Vec<f64>)> {
    let order: Vec<usize> = (0..set.len()).collect();
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for chunk in plan {
        let batch = set.batch(&order[chunk.clone()])?;
        let tape = Tape::new();
        let graph = model.build_loss(&tape, &batch, None, Mode::Infer)?;
        loss_sum += tape.value(graph.loss).data()[0] * chunk.len() as f64;
        preds.extend_from_slice(tape.value(graph.pred).data());
    }
    Ok((loss_sum / set.len() as f64, preds))
}

/// Runs the early-stopped optimization loop for one model: every epoch
/// shuffles the training windows, steps Adam per batch under gradient
/// clipping, then measures validation loss and unscaled-price MAPE in infer
/// mode. Stops when validation loss has not strictly improved for
/// `patience` consecutive epochs or after `max_epochs`, and restores the
/// best-validation checkpoint (parameters and buffers).
pub fn train_model<M: Forecaster>(
    model: &mut M,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    scaler: &FeatureScaler,
    val_prices: &[f64],
) -> Result<ModelRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::TooShort {
            what: format!("{} training windows", model.name()),
            needed: 1,
            got: train.len().min(val.len()),
        });
    }
    if val_prices.len() != val.len() {
        return Err(Error::ShapeMismatch {
            op: "validation prices",
            detail: format!("{} prices for {} windows", val_prices.len(), val.len()),
        });
    }

    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let plan = batch_plan(train.len(), cfg.batch_size);
    let val_plan = batch_plan(val.len(), cfg.batch_size);

    let mut best: Option<(usize, f64, BTreeMap<String, Tensor>)> = None;
    let mut bad_streak = 0usize;
    let mut stats = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in &plan {
            let batch = train.batch(&order[chunk.clone()])?;
            let tape = Tape::new();
            let graph = model.build_loss(&tape, &batch, Some(rng), Mode::Train)?;
            let loss = tape.value(graph.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged { model: model.name().into(), epoch });
            }
            tape.backward(graph.loss)?;
            collect_grads(model, &tape, &graph)?;
            let mut params: Vec<&mut Tensor> =
                model.params_mut().into_iter().map(|(_, t)| t).collect();
            clip_global_norm(&mut params, cfg.grad_clip);
            adam.step(&mut params)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_loss, val_preds) = infer_pass(model, val, &val_plan)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { model: model.name().into(), epoch });
        }
        let unscaled: Vec<f64> = val_preds.iter().map(|&p| scaler.unscale_target(p)).collect();
        let val_mape = evaluation::mape(val_prices, &unscaled)?;

        if best.as_ref().is_none_or(|(_, best_loss, _)| val_loss < *best_loss) {
            best = Some((epoch, val_loss, snapshot(model)));
            bad_streak = 0;
        } else {
            bad_streak += 1;
        }
        stats.push(EpochStat {
            epoch,
            train_loss,
            val_loss,
            val_mape,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if bad_streak >= cfg.patience {
            break;
        }
    }

    let (best_epoch, best_val_loss, weights) = best.expect("at least one epoch ran");
    model.restore(&weights)?;
    Ok(ModelRun { model: model.name().into(), stats, best_epoch, best_val_loss })
}

/// Merges per-model runs into one log and replays the re-weighting schedule:
/// at every cadence epoch the members' validation MAPEs enter the rolling
/// performance window and the weights update. A member that stopped early
/// keeps contributing its final MAPE. Returns the merged log and the final
/// weights (the initial weights when re-weighting is disabled).
pub fn merge_runs(
    runs: &[ModelRun; 3],
    cfg: &TrainConfig,
) -> Result<(TrainingLog, EnsembleWeights)> {
    if let Some(run) = runs.iter().find(|run| run.stats.is_empty()) {
        return Err(Error::BadConfig {
            detail: format!("model run `{}` recorded no epochs", run.model),
        });
    }
    let max_epoch = runs.iter().map(|r| r.stats.len()).max().unwrap_or(0);
    let mut weights = EnsembleWeights::initial();
    let mut window = PerformanceWindow::new(ensemble::PERFORMANCE_WINDOW_LEN)?;
    let mut records = Vec::new();
    for epoch in 1..=max_epoch {
        if let Some(cadence) = cfg.reweight_cadence {
            if epoch % cadence == 0 {
                let mut mapes = [0.0; 3];
                for (slot, run) in mapes.iter_mut().zip(runs) {
                    let last = run.stats.len() - 1;
                    *slot = run.stats[(epoch - 1).min(last)].val_mape;
                }
                window.record_validation(mapes)?;
                weights = ensemble::update_weights(&window, ensemble::WEIGHT_FLOOR)?;
            }
        }
        for run in runs {
            if let Some(stat) = run.stats.get(epoch - 1) {
                records.push(EpochRecord {
                    epoch,
                    model: run.model.clone(),
                    train_loss: stat.train_loss,
                    val_loss: stat.val_loss,
                    weights,
                    wall_secs: stat.wall_secs,
                });
            }
        }
    }
    let summaries = runs
        .iter()
        .map(|r| ModelSummary {
            model: r.model.clone(),
            best_epoch: r.best_epoch,
            best_val_loss: r.best_val_loss,
            epochs_run: r.stats.len(),
        })
        .collect();
    Ok((TrainingLog { records, summaries }, weights))
}

/// Per-window predictions of each member and the ensemble, in price units.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePredictions {
    pub vae: Vec<f64>,
    pub transformer: Vec<f64>,
    pub lstm: Vec<f64>,
    pub ensemble: Vec<f64>,
}

/// A trained ensemble ready for evaluation, prediction, and export.
pub struct TrainedEnsemble {
    pub vae: VaeModel,
    pub transformer: TransformerModel,
    pub lstm: LstmModel,
    pub scaler: FeatureScaler,
    pub weights: EnsembleWeights,
    pub log: TrainingLog,
    pub split: DatasetSplit,
    pub config: TrainConfig,
}

/// Everything in the bundle besides the raw checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub config: TrainConfig,
    pub scaler: FeatureScaler,
    pub weights: EnsembleWeights,
    pub split: DatasetSplit,
    pub summaries: Vec<ModelSummary>,
}

const CHECKPOINT_FILES: [&str; 3] = ["vae.ckpt", "transformer.ckpt", "lstm.ckpt"];
pub const MANIFEST_FILE: &str = "manifest.json";

fn join_member<T>(result: thread::Result<Result<T>>) -> Result<T> {
    match result {
        Ok(inner) => inner,
        Err(panic) => std::panic::resume_unwind(panic),
    }
}

/// Trains the three members concurrently on identical window sets and
/// assembles the ensemble. The split, scaler, and window sets derive from
/// the train range only; validation enters solely through early stopping
/// and the re-weighting signal.
pub fn train_ensemble(matrix: &FeatureMatrix, cfg: &TrainConfig) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    crate::retain_freed_buffers();
    let (_, rows) = matrix.dense_rows();
    let names: Vec<String> = matrix.names().iter().map(|s| s.to_string()).collect();
    let split = make_splits(rows.len(), cfg.sequence_length, SPLIT_PROPORTIONS)?;
    let scaler = FeatureScaler::fit(&names, &rows, &split.train)?;
    let train_set = make_windows(&rows, &scaler, split.train.clone(), cfg.sequence_length)?;
    let val_set = make_windows(&rows, &scaler, split.validation.clone(), cfg.sequence_length)?;
    // Train targets fall inside the scaler's own fit range; only validation
    // and test targets may leave [-1, 1].
    debug_assert!(train_set.targets().iter().all(|t| (-1.0..=1.0).contains(t)));
    let val_prices: Vec<f64> = val_set
        .target_rows()
        .iter()
        .map(|&r| rows[r][scaler.close_index()])
        .collect();
    let (seq, feats) = (cfg.sequence_length, names.len());

    let (vae_out, tfm_out, lstm_out) = thread::scope(|scope| {
        let vae = scope.spawn(|| {
            let base = RngStream::from_seed(cfg.seeds.vae);
            let mut model = VaeModel::new(seq, feats, cfg.vae, &mut base.derive("init"))?;
            let run = train_model(
                &mut model,
                &train_set,
                &val_set,
                cfg,
                &mut base.derive("train"),
                &scaler,
                &val_prices,
            )?;
            Ok((model, run))
        });
        let tfm = scope.spawn(|| {
            let base = RngStream::from_seed(cfg.seeds.transformer);
            let mut model =
                TransformerModel::new(seq, feats, cfg.transformer, &mut base.derive("init"))?;
            let run = train_model(
                &mut model,
                &train_set,
                &val_set,
                cfg,
                &mut base.derive("train"),
                &scaler,
                &val_prices,
            )?;
            Ok((model, run))
        });
        let lstm = scope.spawn(|| {
            let base = RngStream::from_seed(cfg.seeds.lstm);
            let mut model = LstmModel::new(seq, feats, cfg.lstm, &mut base.derive("init"))?;
            let run = train_model(
                &mut model,
                &train_set,
                &val_set,
                cfg,
                &mut base.derive("train"),
                &scaler,
                &val_prices,
            )?;
            Ok((model, run))
        });
        (vae.join(), tfm.join(), lstm.join())
    });
    let (vae, vae_run) = join_member(vae_out)?;
    let (transformer, tfm_run) = join_member(tfm_out)?;
    let (lstm, lstm_run) = join_member(lstm_out)?;

    let (log, weights) = merge_runs(&[vae_run, tfm_run, lstm_run], cfg)?;
    Ok(TrainedEnsemble { vae, transformer, lstm, scaler, weights, log, split, config: cfg.clone() })
}

impl TrainedEnsemble {
    /// Member and combined predictions for every window, unscaled to price
    /// units. Combination happens in scaled space; unscaling is a monotone
    /// affine map, so each ensemble prediction stays inside its members'
    /// envelope.
    pub fn predict_set(&self, set: &WindowSet) -> Result<EnsemblePredictions> {
        let plan = batch_plan(set.len(), self.config.batch_size);
        let order: Vec<usize> = (0..set.len()).collect();
        let mut scaled: [Vec<f64>; 3] = [
            Vec::with_capacity(set.len()),
            Vec::with_capacity(set.len()),
            Vec::with_capacity(set.len()),
        ];
        for chunk in &plan {
            let batch = set.batch(&order[chunk.clone()])?;
            scaled[0].extend(self.vae.predict(&batch)?);
            scaled[1].extend(self.transformer.predict(&batch)?);
            scaled[2].extend(self.lstm.predict(&batch)?);
        }
        let combined = ensemble::combine(&scaled[0], &scaled[1], &scaled[2], &self.weights)?;
        let unscale = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter().map(|p| self.scaler.unscale_target(p)).collect()
        };
        let [vae, transformer, lstm] = scaled;
        Ok(EnsemblePredictions {
            vae: unscale(vae),
            transformer: unscale(transformer),
            lstm: unscale(lstm),
            ensemble: unscale(combined),
        })
    }

    /// Writes the three checkpoints plus `manifest.json` into `dir`.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        let members: [&dyn Forecaster; 3] = [&self.vae, &self.transformer, &self.lstm];
        for (file, model) in CHECKPOINT_FILES.iter().zip(members) {
            let named = snapshot(model);
            let entries: Vec<(&str, &Tensor)> =
                named.iter().map(|(n, t)| (n.as_str(), t)).collect();
            checkpoint::save(&dir.join(file), &entries)?;
        }
        let manifest = BundleManifest {
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            weights: self.weights,
            split: self.split.clone(),
            summaries: self.log.summaries.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::BadConfig { detail: format!("manifest serialization: {e}") })?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::Io { path, source: e })
    }

    /// Reconstructs a trained ensemble from a bundle directory. The loaded
    /// log carries only the per-model summaries; the full epoch history
    /// lives in the exported CSV, not the bundle.
    pub fn load_bundle(dir: &Path) -> Result<TrainedEnsemble> {
        let path = dir.join(MANIFEST_FILE);
        let raw = std::fs::read_to_string(&path)
            .map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let manifest: BundleManifest = serde_json::from_str(&raw)
            .map_err(|e| Error::BadCheckpoint { path, detail: format!("manifest: {e}") })?;
        manifest.config.validate()?;
        manifest.weights.validate()?;
        let cfg = &manifest.config;
        let (seq, feats) = (cfg.sequence_length, manifest.scaler.features());

        let mut vae =
            VaeModel::new(seq, feats, cfg.vae, &mut RngStream::from_seed(cfg.seeds.vae).derive("init"))?;
        let mut transformer = TransformerModel::new(
            seq,
            feats,
            cfg.transformer,
            &mut RngStream::from_seed(cfg.seeds.transformer).derive("init"),
        )?;
        let mut lstm = LstmModel::new(
            seq,
            feats,
            cfg.lstm,
            &mut RngStream::from_seed(cfg.seeds.lstm).derive("init"),
        )?;
        let members: [&mut dyn Forecaster; 3] = [&mut vae, &mut transformer, &mut lstm];
        for (file, model) in CHECKPOINT_FILES.iter().zip(members) {
            let entries = checkpoint::load(&dir.join(file))?;
            let named: BTreeMap<String, Tensor> = entries.into_iter().collect();
            model.restore(&named)?;
        }
        Ok(TrainedEnsemble {
            vae,
            transformer,
            lstm,
            scaler: manifest.scaler,
            weights: manifest.weights,
            log: TrainingLog { records: Vec::new(), summaries: manifest.summaries },
            split: manifest.split,
            config: manifest.config,
        })
    }
}

/// Scales the most recent `sequence_length` rows into a single inference
/// window (the target slot is a placeholder; nothing consumes it).
pub fn latest_window(
    rows: &[Vec<f64>],
    scaler: &FeatureScaler,
    sequence_length: usize,
) -> Result<WindowBatch> {
    if rows.len() < sequence_length {
        return Err(Error::TooShort {
            what: "inference window".into(),
            needed: sequence_length,
            got: rows.len(),
        });
    }
    let mut inputs = Vec::with_capacity(sequence_length * scaler.features());
    for row in &rows[rows.len() - sequence_length..] {
        scaler.scale_row_into(row, &mut inputs)?;
    }
    WindowBatch::new(1, sequence_length, scaler.features(), inputs, vec![0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indicators::{FeatureMatrix, IndicatorColumn};
    use chrono::NaiveDate;

    fn approx(x: f64, y: f64, tol: f64) {
        assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
    }

    #[test]
    fn splits_follow_the_documented_rounding() {
        let s = make_splits(100, 60, SPLIT_PROPORTIONS).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 15, 15));

        let s = make_splits(101, 60, SPLIT_PROPORTIONS).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 15, 16));
        assert_eq!(s.train.end, s.validation.start);
        assert_eq!(s.validation.end, s.test.start);
        assert_eq!(s.test.end, 101);

        assert!(matches!(
            make_splits(10, 60, SPLIT_PROPORTIONS),
            Err(Error::TooShort { needed: 63, .. })
        ));
        assert!(make_splits(100, 60, (0.5, 0.2, 0.2)).is_err());
        assert!(make_splits(100, 60, (0.7, 0.15, -0.15)).is_err());
    }

    fn toy_rows() -> (Vec<String>, Vec<Vec<f64>>) {
        let names = vec!["volume_z".to_string(), "close".to_string()];
        let rows = (0..30).map(|i| vec![(i % 7) as f64, 10.0 + i as f64]).collect();
        (names, rows)
    }

    #[test]
    fn scaler_maps_the_train_range_onto_the_unit_interval() {
        let names = vec!["f".to_string(), "close".to_string()];
        let rows: Vec<Vec<f64>> =
            vec![vec![10.0, 10.0], vec![20.0, 20.0], vec![12.0, 12.0], vec![25.0, 99.0]];
        let scaler = FeatureScaler::fit(&names, &rows, &(0..3)).unwrap();

        assert_eq!(scaler.scale_value(0, 15.0), 0.0);
        assert_eq!(scaler.scale_value(0, 20.0), 1.0);
        assert_eq!(scaler.scale_value(0, 10.0), -1.0);
        assert_eq!(scaler.scale_value(0, 25.0), 2.0);

        assert_eq!(scaler.close_index(), 1);
        assert_eq!(scaler.scale_target(20.0), 1.0);
        for v in [10.0, 13.7, 20.0, 25.0, -4.0] {
            approx(scaler.unscale_value(0, scaler.scale_value(0, v)), v, 1e-10);
        }
    }

    #[test]
    fn scaler_sends_constant_features_to_zero() {
        let names = vec!["flat".to_string(), "close".to_string()];
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![3.0, i as f64]).collect();
        let scaler = FeatureScaler::fit(&names, &rows, &(0..5)).unwrap();
        assert_eq!(scaler.scale_value(0, 3.0), 0.0);
        assert_eq!(scaler.scale_value(0, 17.0), 0.0);
        assert_eq!(scaler.unscale_value(0, 0.0), 3.0);
    }

    #[test]
    fn scaler_rejects_bad_inputs() {
        let (names, rows) = toy_rows();
        assert!(matches!(
            FeatureScaler::fit(&names, &rows, &(5..5)),
            Err(Error::BadConfig { .. })
        ));
        assert!(matches!(
            FeatureScaler::fit(&names, &rows, &(0..99)),
            Err(Error::BadConfig { .. })
        ));
        let no_close = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            FeatureScaler::fit(&no_close, &rows, &(0..5)),
            Err(Error::MissingColumn { .. })
        ));
        let mut ragged = rows.clone();
        ragged[2].push(1.0);
        assert!(matches!(
            FeatureScaler::fit(&names, &ragged, &(0..5)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn window_counts_equal_range_length_minus_sequence() {
        let (names, rows) = toy_rows();
        let scaler = FeatureScaler::fit(&names, &rows, &(0..20)).unwrap();

        let set = make_windows(&rows, &scaler, 5..15, 4).unwrap();
        assert_eq!(set.len(), 10 - 4);
        assert_eq!(set.target_rows(), &[9, 10, 11, 12, 13, 14]);
        assert!(set.target_rows().iter().all(|&r| r < 15));

        // First window reproduces the scaled rows 5..9 exactly.
        let batch = set.batch(&[0]).unwrap();
        let mut expected = Vec::new();
        for r in 5..9 {
            scaler.scale_row_into(&rows[r], &mut expected).unwrap();
        }
        assert_eq!(batch.inputs(), &expected[..]);
        assert_eq!(batch.targets(), &[scaler.scale_target(rows[9][1])]);

        let one = make_windows(&rows, &scaler, 0..11, 10).unwrap();
        assert_eq!(one.len(), 1);
        assert!(matches!(
            make_windows(&rows, &scaler, 0..10, 10),
            Err(Error::TooShort { needed: 11, .. })
        ));
    }

    #[test]
    fn sixty_step_window_arithmetic_matches_the_examples() {
        let names = vec!["close".to_string()];
        let rows: Vec<Vec<f64>> = (0..124).map(|i| vec![i as f64]).collect();
        let scaler = FeatureScaler::fit(&names, &rows, &(0..124)).unwrap();

        assert_eq!(make_windows(&rows, &scaler, 0..61, 60).unwrap().len(), 1);
        let set = make_windows(&rows, &scaler, 0..124, 60).unwrap();
        assert_eq!(set.len(), 64);
        assert_eq!(batch_plan(set.len(), 64), vec![0..64]);
    }

    #[test]
    fn batch_plans_keep_short_tails_but_never_singletons() {
        assert_eq!(batch_plan(64, 64), vec![0..64]);
        assert_eq!(batch_plan(130, 64), vec![0..64, 64..128, 128..130]);
        assert_eq!(batch_plan(65, 64), vec![0..63, 63..65]);
        assert_eq!(batch_plan(129, 64), vec![0..64, 64..127, 127..129]);
        assert_eq!(batch_plan(1, 64), vec![0..1]);
        assert_eq!(batch_plan(5, 2), vec![0..2, 2..5]);
        assert_eq!(batch_plan(3, 2), vec![0..3]);
        assert_eq!(batch_plan(7, 3), vec![0..3, 3..5, 5..7]);
    }

    #[test]
    fn config_validation_covers_every_field() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { sequence_length: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { max_epochs: 0, patience: 0, ..TrainConfig::default() },
            TrainConfig { patience: 301, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { grad_clip: f64::NAN, ..TrainConfig::default() },
            TrainConfig { reweight_cadence: Some(0), ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    // Minimal deterministic model with scripted validation losses: one
    // trainable scalar pulled toward zero by MSE, constant predictions,
    // and an infer-mode loss read from the script per validation pass.
    struct Scripted {
        val_losses: Vec<f64>,
        infer_calls: usize,
        train_calls: usize,
        nan_on_train_call: Option<usize>,
        param: Tensor,
    }

    impl Scripted {
        fn new(val_losses: Vec<f64>) -> Self {
            Scripted {
                val_losses,
                infer_calls: 0,
                train_calls: 0,
                nan_on_train_call: None,
                param: Tensor::from_vec(vec![0.5]).trainable(),
            }
        }
    }

    impl Forecaster for Scripted {
        fn name(&self) -> &'static str {
            "scripted"
        }

        fn build_loss(
            &mut self,
            tape: &Tape,
            batch: &WindowBatch,
            _rng: Option<&mut RngStream>,
            mode: Mode,
        ) -> Result<crate::models::LossGraph> {
            let pred = tape.constant(
                Tensor::new(vec![batch.batch(), 1], vec![0.25; batch.batch()]).unwrap(),
            );
            let leaf = tape.leaf(self.param.clone());
            let loss = match mode {
                Mode::Train => {
                    self.train_calls += 1;
                    if self.nan_on_train_call == Some(self.train_calls) {
                        tape.constant(Tensor::from_vec(vec![f64::NAN]))
                    } else {
                        let target = tape.constant(Tensor::from_vec(vec![0.0]));
                        tape.mse_loss(leaf, target)?
                    }
                }
                Mode::Infer => {
                    let idx = self.infer_calls.min(self.val_losses.len() - 1);
                    self.infer_calls += 1;
                    tape.constant(Tensor::from_vec(vec![self.val_losses[idx]]))
                }
            };
            Ok(crate::models::LossGraph { loss, pred, leaves: vec![leaf] })
        }

        fn predict(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
            Ok(vec![0.25; batch.batch()])
        }

        fn params(&self) -> Vec<(String, &Tensor)> {
            vec![("param".into(), &self.param)]
        }

        fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("param".into(), &mut self.param)]
        }

        fn buffers(&self) -> Vec<(String, Tensor)> {
            Vec::new()
        }

        fn restore(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
            let t = tensors.get("param").ok_or_else(|| Error::SchemaMismatch {
                detail: "missing `param`".into(),
            })?;
            self.param = t.clone().trainable();
            Ok(())
        }
    }

    // One training window, one validation window, so each epoch makes
    // exactly one train call and one infer call.
    fn stub_sets() -> (FeatureScaler, WindowSet, WindowSet, Vec<f64>) {
        let (names, rows) = toy_rows();
        let scaler = FeatureScaler::fit(&names, &rows, &(0..10)).unwrap();
        let train = make_windows(&rows, &scaler, 0..4, 3).unwrap();
        let val = make_windows(&rows, &scaler, 10..14, 3).unwrap();
        let val_prices: Vec<f64> =
            val.target_rows().iter().map(|&r| rows[r][1]).collect();
        (scaler, train, val, val_prices)
    }

    fn stub_config() -> TrainConfig {
        TrainConfig {
            sequence_length: 3,
            batch_size: 4,
            max_epochs: 300,
            patience: 30,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_validation_loss_stops_after_patience_plus_one() {
        let (scaler, train, val, prices) = stub_sets();
        let mut model = Scripted::new(vec![1.0]);
        let mut rng = RngStream::from_seed(3);
        let run =
            train_model(&mut model, &train, &val, &stub_config(), &mut rng, &scaler, &prices)
                .unwrap();
        assert_eq!(run.epochs_run(), 31);
        assert_eq!(run.best_epoch, 1);
        assert_eq!(run.best_val_loss, 1.0);
        let epochs: Vec<usize> = run.stats.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, (1..=31).collect::<Vec<_>>());
    }

    #[test]
    fn improving_validation_loss_runs_to_max_epochs() {
        let (scaler, train, val, prices) = stub_sets();
        let losses: Vec<f64> = (0..12).map(|i| 1.0 / (i + 1) as f64).collect();
        let mut model = Scripted::new(losses);
        let mut rng = RngStream::from_seed(3);
        let cfg = TrainConfig { max_epochs: 12, patience: 5, ..stub_config() };
        let run = train_model(&mut model, &train, &val, &cfg, &mut rng, &scaler, &prices).unwrap();
        assert_eq!(run.epochs_run(), 12);
        assert_eq!(run.best_epoch, 12);
    }

    #[test]
    fn nan_training_loss_aborts_with_the_epoch() {
        let (scaler, train, val, prices) = stub_sets();
        let mut model = Scripted::new(vec![1.0]);
        model.nan_on_train_call = Some(2);
        let mut rng = RngStream::from_seed(3);
        let err = train_model(&mut model, &train, &val, &stub_config(), &mut rng, &scaler, &prices)
            .unwrap_err();
        match err {
            Error::Diverged { model, epoch } => {
                assert_eq!(model, "scripted");
                assert_eq!(epoch, 2);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn tiny_vae_config() -> TrainConfig {
        TrainConfig {
            sequence_length: 4,
            batch_size: 8,
            max_epochs: 4,
            patience: 4,
            vae: VaeConfig { hidden_dim: 8, latent_dim: 3, ..VaeConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn wavy_rows(n: usize) -> (Vec<String>, Vec<Vec<f64>>) {
        let names = vec!["roc".to_string(), "close".to_string()];
        let rows = (0..n)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.4).cos(), 50.0 + 6.0 * (t * 0.21).sin() + 0.01 * t]
            })
            .collect();
        (names, rows)
    }

    #[test]
    fn restored_model_reproduces_the_best_logged_validation_loss() {
        let (names, rows) = wavy_rows(60);
        let cfg = tiny_vae_config();
        let scaler = FeatureScaler::fit(&names, &rows, &(0..40)).unwrap();
        let train = make_windows(&rows, &scaler, 0..40, 4).unwrap();
        let val = make_windows(&rows, &scaler, 40..60, 4).unwrap();
        let prices: Vec<f64> = val.target_rows().iter().map(|&r| rows[r][1]).collect();

        let base = RngStream::from_seed(cfg.seeds.vae);
        let mut model = VaeModel::new(4, 2, cfg.vae, &mut base.derive("init")).unwrap();
        let run = train_model(
            &mut model,
            &train,
            &val,
            &cfg,
            &mut base.derive("train"),
            &scaler,
            &prices,
        )
        .unwrap();

        let min_logged =
            run.stats.iter().map(|s| s.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(run.best_val_loss, min_logged);
        let plan = batch_plan(val.len(), cfg.batch_size);
        let (reval, _) = infer_pass(&mut model, &val, &plan).unwrap();
        assert_eq!(reval, run.best_val_loss);
    }

    #[test]
    fn fixed_seeds_reproduce_identical_runs() {
        let (names, rows) = wavy_rows(60);
        let cfg = TrainConfig { max_epochs: 3, patience: 3, ..tiny_vae_config() };
        let scaler = FeatureScaler::fit(&names, &rows, &(0..40)).unwrap();
        let train = make_windows(&rows, &scaler, 0..40, 4).unwrap();
        let val = make_windows(&rows, &scaler, 40..60, 4).unwrap();
        let prices: Vec<f64> = val.target_rows().iter().map(|&r| rows[r][1]).collect();

        let mut runs = Vec::new();
        for _ in 0..2 {
            let base = RngStream::from_seed(7);
            let mut model = VaeModel::new(4, 2, cfg.vae, &mut base.derive("init")).unwrap();
            let run = train_model(
                &mut model,
                &train,
                &val,
                &cfg,
                &mut base.derive("train"),
                &scaler,
                &prices,
            )
            .unwrap();
            runs.push(run);
        }
        let strip = |r: &ModelRun| {
            (
                r.best_epoch,
                r.best_val_loss.to_bits(),
                r.stats
                    .iter()
                    .map(|s| {
                        (
                            s.epoch,
                            s.train_loss.to_bits(),
                            s.val_loss.to_bits(),
                            s.val_mape.to_bits(),
                        )
                    })
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(strip(&runs[0]), strip(&runs[1]));
    }

    #[test]
    fn validation_and_test_values_never_touch_fitted_statistics() {
        let (names, rows) = wavy_rows(80);
        let split = make_splits(rows.len(), 4, SPLIT_PROPORTIONS).unwrap();
        let mut shifted = rows.clone();
        for row in &mut shifted[split.train.end..] {
            for v in row.iter_mut() {
                *v += 25.0;
            }
        }

        let scaler_a = FeatureScaler::fit(&names, &rows, &split.train).unwrap();
        let scaler_b = FeatureScaler::fit(&names, &shifted, &split.train).unwrap();
        assert_eq!(scaler_a, scaler_b);

        let cfg = TrainConfig { max_epochs: 3, patience: 3, ..tiny_vae_config() };
        let mut train_losses = Vec::new();
        for data in [&rows, &shifted] {
            let train =
                make_windows(data, &scaler_a, split.train.clone(), 4).unwrap();
            let val =
                make_windows(data, &scaler_a, split.validation.clone(), 4).unwrap();
            let prices: Vec<f64> =
                val.target_rows().iter().map(|&r| data[r][1]).collect();
            let base = RngStream::from_seed(5);
            let mut model = VaeModel::new(4, 2, cfg.vae, &mut base.derive("init")).unwrap();
            let run = train_model(
                &mut model,
                &train,
                &val,
                &cfg,
                &mut base.derive("train"),
                &scaler_a,
                &prices,
            )
            .unwrap();
            train_losses
                .push(run.stats.iter().map(|s| s.train_loss.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(train_losses[0], train_losses[1]);
    }

    fn hand_run(model: &str, mapes: &[f64]) -> ModelRun {
        ModelRun {
            model: model.into(),
            stats: mapes
                .iter()
                .enumerate()
                .map(|(i, &m)| EpochStat {
                    epoch: i + 1,
                    train_loss: 0.5,
                    val_loss: 0.4,
                    val_mape: m,
                    wall_secs: 0.0,
                })
                .collect(),
            best_epoch: 1,
            best_val_loss: 0.4,
        }
    }

    #[test]
    fn merged_weights_stay_symmetric_for_identical_members() {
        let cfg = TrainConfig { reweight_cadence: Some(2), ..stub_config() };
        let runs = [
            hand_run("vae", &[2.0; 6]),
            hand_run("transformer", &[2.0; 6]),
            hand_run("lstm", &[2.0; 6]),
        ];
        let (log, weights) = merge_runs(&runs, &cfg).unwrap();
        approx(weights.w_vae, 1.0 / 3.0, 1e-12);
        assert_eq!(weights.w_vae, weights.w_transformer);
        assert_eq!(weights.w_vae, weights.w_lstm);
        assert_eq!(log.records().len(), 18);
    }

    #[test]
    fn disabling_reweighting_freezes_the_initial_weights() {
        let cfg = TrainConfig { reweight_cadence: None, ..stub_config() };
        let runs = [
            hand_run("vae", &[1.0; 4]),
            hand_run("transformer", &[9.0; 4]),
            hand_run("lstm", &[4.0; 4]),
        ];
        let (log, weights) = merge_runs(&runs, &cfg).unwrap();
        assert_eq!(weights, EnsembleWeights::initial());
        assert!(log.records().iter().all(|r| r.weights == EnsembleWeights::initial()));
    }

    #[test]
    fn stopped_members_keep_contributing_their_final_mape() {
        let cfg = TrainConfig { reweight_cadence: Some(3), ..stub_config() };
        let runs = [
            hand_run("vae", &[1.0, 1.0]),
            hand_run("transformer", &[2.0; 6]),
            hand_run("lstm", &[2.0; 6]),
        ];
        let (log, weights) = merge_runs(&runs, &cfg).unwrap();
        approx(weights.w_vae, 0.5, 1e-7);
        approx(weights.w_transformer, 0.25, 1e-7);
        approx(weights.w_lstm, 0.25, 1e-7);

        // Epoch 2 rows still show the initial weights; epoch 3 rows show
        // the updated state, and the stopped member logs no further rows.
        let at = |e: usize| -> Vec<&EpochRecord> {
            log.records().iter().filter(|r| r.epoch == e).collect()
        };
        assert_eq!(at(2).len(), 3);
        assert!(at(2).iter().all(|r| r.weights == EnsembleWeights::initial()));
        assert_eq!(at(3).len(), 2);
        assert!(at(3).iter().all(|r| (r.weights.w_vae - 0.5).abs() < 1e-6));
        assert!(merge_runs(&[hand_run("a", &[]), hand_run("b", &[1.0]), hand_run("c", &[1.0])], &cfg).is_err());
    }

    #[test]
    fn log_csv_has_the_fixed_columns() {
        let cfg = TrainConfig { reweight_cadence: None, ..stub_config() };
        let runs =
            [hand_run("vae", &[1.0]), hand_run("transformer", &[1.0]), hand_run("lstm", &[1.0])];
        let (log, _) = merge_runs(&runs, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,model,train_loss,val_loss,w1,w2,w3");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "1,vae,0.5,0.4,0.3,0.3,0.4");
    }

    fn small_matrix(n: usize) -> FeatureMatrix {
        let (_, rows) = wavy_rows(n);
        let dates: Vec<NaiveDate> = (0..n as i64)
            .map(|i| NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Days::new(i as u64))
            .collect();
        let col = |name: &str, idx: usize| {
            IndicatorColumn::new(
                name,
                rows.iter().map(|r| Some(r[idx])).collect::<Vec<_>>(),
                0,
            )
            .unwrap()
        };
        FeatureMatrix::new(dates, vec![col("roc", 0), col("close", 1)]).unwrap()
    }

    fn small_train_config() -> TrainConfig {
        TrainConfig {
            sequence_length: 6,
            batch_size: 16,
            max_epochs: 2,
            patience: 2,
            reweight_cadence: Some(1),
            vae: VaeConfig { hidden_dim: 8, latent_dim: 3, ..VaeConfig::default() },
            transformer: TransformerConfig {
                d_model: 8,
                heads: 2,
                blocks: 1,
                ffn_dim: 16,
                ..TransformerConfig::default()
            },
            lstm: LstmConfig { hidden_dim: 6, layers: 1, ..LstmConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ensemble_training_logs_and_bundles_round_trip() {
        let matrix = small_matrix(140);
        let cfg = small_train_config();
        let trained = train_ensemble(&matrix, &cfg).unwrap();

        // Consecutive epochs from 1 for every member.
        for model in ["vae", "transformer", "lstm"] {
            let epochs: Vec<usize> = trained
                .log
                .records()
                .iter()
                .filter(|r| r.model == model)
                .map(|r| r.epoch)
                .collect();
            assert_eq!(epochs, (1..=epochs.len()).collect::<Vec<_>>());
            assert!(!epochs.is_empty());
        }
        trained.weights.validate().unwrap();

        // Chronology: train targets precede validation targets precede test.
        let (_, rows) = matrix.dense_rows();
        let split = &trained.split;
        let t = make_windows(&rows, &trained.scaler, split.train.clone(), 6).unwrap();
        let v = make_windows(&rows, &trained.scaler, split.validation.clone(), 6).unwrap();
        let s = make_windows(&rows, &trained.scaler, split.test.clone(), 6).unwrap();
        assert!(t.target_rows().last().unwrap() < v.target_rows().first().unwrap());
        assert!(v.target_rows().last().unwrap() < s.target_rows().first().unwrap());

        let fresh = trained.predict_set(&s).unwrap();
        for i in 0..fresh.ensemble.len() {
            let members = [fresh.vae[i], fresh.transformer[i], fresh.lstm[i]];
            let lo = members.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(fresh.ensemble[i] >= lo && fresh.ensemble[i] <= hi);
        }

        let dir = tempfile::tempdir().unwrap();
        trained.save_bundle(dir.path()).unwrap();
        let loaded = TrainedEnsemble::load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.scaler, trained.scaler);
        assert_eq!(loaded.weights, trained.weights);
        assert_eq!(loaded.split, trained.split);
        let reloaded = loaded.predict_set(&s).unwrap();
        assert_eq!(reloaded, fresh);
    }

    #[test]
    fn latest_window_scales_the_most_recent_rows() {
        let (names, rows) = toy_rows();
        let scaler = FeatureScaler::fit(&names, &rows, &(0..30)).unwrap();
        let batch = latest_window(&rows, &scaler, 5).unwrap();
        assert_eq!(batch.batch(), 1);
        assert_eq!(batch.seq_len(), 5);
        let mut expected = Vec::new();
        for row in &rows[25..] {
            scaler.scale_row_into(row, &mut expected).unwrap();
        }
        assert_eq!(batch.inputs(), &expected[..]);
        assert!(latest_window(&rows[..3], &scaler, 5).is_err());
    }
}
