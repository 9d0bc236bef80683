//! The three forecasting models and their shared contract.
//!
//! Each model maps a scaled 60-step feature window to one next-step
//! normalized prediction through a tanh head, so outputs always land
//! strictly inside (-1, 1). Models expose their full training loss as a
//! tape graph (the trainer owns the optimization loop) plus named
//! parameters and buffers for checkpointing.

pub mod lstm;
pub mod transformer;
pub mod vae;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::rng::RngStream;
use crate::tensor::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub use lstm::{LstmConfig, LstmModel};
pub use transformer::{TransformerConfig, TransformerModel};
pub use vae::{VaeConfig, VaeModel};

/// One mini-batch of supervised windows. Inputs are stored row-major as
/// `[batch, seq_len * features]` with time-major layout inside each row
/// (`t * features + f`), which doubles as a `[batch * seq_len, features]`
/// view without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    batch: usize,
    seq_len: usize,
    features: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl WindowBatch {
    pub fn new(
        batch: usize,
        seq_len: usize,
        features: usize,
        inputs: Vec<f64>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        if batch == 0 || seq_len == 0 || features == 0 {
            return Err(Error::BadConfig { detail: "empty window batch dimensions".into() });
        }
        if inputs.len() != batch * seq_len * features || targets.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "window_batch",
                detail: format!(
                    "{} inputs / {} targets for batch {} x {} x {}",
                    inputs.len(),
                    targets.len(),
                    batch,
                    seq_len,
                    features
                ),
            });
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "window batch inputs".into() });
        }
        // Targets are scaled closes but deliberately unclipped, so values
        // beyond [-1, 1] are legitimate outside the scaler's fit range.
        if !targets.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite { context: "window batch targets".into() });
        }
        Ok(WindowBatch { batch, seq_len, features, inputs, targets })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// `[batch, seq_len * features]`: one flattened window per row.
    pub fn flat_windows(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.seq_len * self.features], self.inputs.clone())
            .expect("validated dims")
    }

    /// `[batch * seq_len, features]`: row `b * seq_len + t` holds step `t`
    /// of window `b`. Same memory as [`WindowBatch::flat_windows`].
    pub fn step_rows(&self) -> Tensor {
        Tensor::new(vec![self.batch * self.seq_len, self.features], self.inputs.clone())
            .expect("validated dims")
    }

    /// `[seq_len * batch, features]`: row `t * batch + b`, the layout the
    /// recurrent model consumes (one contiguous block per time step).
    pub fn time_major_rows(&self) -> Tensor {
        let mut data = vec![0.0; self.inputs.len()];
        for b in 0..self.batch {
            for t in 0..self.seq_len {
                let src = (b * self.seq_len + t) * self.features;
                let dst = (t * self.batch + b) * self.features;
                data[dst..dst + self.features].copy_from_slice(&self.inputs[src..src + self.features]);
            }
        }
        Tensor::new(vec![self.seq_len * self.batch, self.features], data).expect("validated dims")
    }

    pub fn targets_tensor(&self) -> Tensor {
        Tensor::new(vec![self.batch, 1], self.targets.clone()).expect("validated dims")
    }
}

/// A recorded training-loss graph: the scalar loss, the per-sample
/// prediction node, and the parameter leaves in [`Forecaster::params`]
/// order (so gradients can be routed back by position).
pub struct LossGraph {
    pub loss: Var,
    pub pred: Var,
    pub leaves: Vec<Var>,
}

/// Contract shared by the three ensemble members.
pub trait Forecaster {
    fn name(&self) -> &'static str;

    /// Records the model's full training loss for one batch. Train mode
    /// needs an entropy stream (dropout masks, sampling noise) and may
    /// update internal normalization statistics; infer mode is pure and
    /// draws nothing, so validation losses never perturb the stream.
    fn build_loss(
        &mut self,
        tape: &Tape,
        batch: &WindowBatch,
        rng: Option<&mut RngStream>,
        mode: Mode,
    ) -> Result<LossGraph>;

    /// Pure inference: per-sample predictions in (-1, 1).
    fn predict(&self, batch: &WindowBatch) -> Result<Vec<f64>>;

    /// Named parameters in a fixed order matching [`LossGraph::leaves`].
    fn params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Non-trained state that still belongs in a checkpoint (running
    /// normalization statistics).
    fn buffers(&self) -> Vec<(String, Tensor)>;

    /// Restores parameters and buffers from named tensors, checking
    /// shapes. Extra names are rejected; missing names are an error.
    fn restore(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()>;
}

/// Writes gradients produced by `backward` into the model's parameter
/// tensors, position by position.
pub fn collect_grads(model: &mut dyn Forecaster, tape: &Tape, graph: &LossGraph) -> Result<()> {
    let mut params = model.params_mut();
    if params.len() != graph.leaves.len() {
        return Err(Error::ShapeMismatch {
            op: "collect_grads",
            detail: format!("{} params vs {} leaves", params.len(), graph.leaves.len()),
        });
    }
    for ((_, tensor), leaf) in params.iter_mut().zip(&graph.leaves) {
        tensor.grad = tape.take_grad(*leaf);
    }
    Ok(())
}

/// Shared restore plumbing: every expected name must be present with the
/// right shape, and nothing unexpected may remain.
pub(crate) fn restore_named(
    expected: Vec<(String, &mut Tensor)>,
    buffers: Vec<(String, &mut Vec<f64>)>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut seen = 0usize;
    for (name, slot) in expected {
        let found = tensors.get(&name).ok_or_else(|| Error::SchemaMismatch {
            detail: format!("checkpoint is missing tensor `{name}`"),
        })?;
        if found.shape() != slot.shape() {
            return Err(Error::SchemaMismatch {
                detail: format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    found.shape(),
                    slot.shape()
                ),
            });
        }
        slot.data_mut().copy_from_slice(found.data());
        slot.grad = None;
        seen += 1;
    }
    for (name, slot) in buffers {
        let found = tensors.get(&name).ok_or_else(|| Error::SchemaMismatch {
            detail: format!("checkpoint is missing buffer `{name}`"),
        })?;
        if found.len() != slot.len() {
            return Err(Error::SchemaMismatch {
                detail: format!(
                    "buffer `{name}` has {} values, expected {}",
                    found.len(),
                    slot.len()
                ),
            });
        }
        slot.copy_from_slice(found.data());
        seen += 1;
    }
    if seen != tensors.len() {
        return Err(Error::SchemaMismatch {
            detail: format!("checkpoint has {} tensors, model expects {seen}", tensors.len()),
        });
    }
    Ok(())
}

/// Xavier-uniform weight matrix for a `rows x cols` linear map.
pub(crate) fn init_weight(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    rng.xavier_uniform(vec![rows, cols], rows, cols)
}

pub(crate) fn zero_bias(len: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![len]);
    t.requires_grad = true;
    t
}

/// All-ones trainable vector, the identity starting point for
/// normalization gains.
pub(crate) fn unit_gain(len: usize) -> Tensor {
    Tensor::new(vec![len], vec![1.0; len]).expect("shape/product consistency").trainable()
}

/// Dropout that tolerates the absent entropy stream of inference calls.
/// Train mode with a nonzero rate and no stream is a wiring bug and is
/// reported as such.
pub(crate) fn apply_dropout(
    tape: &Tape,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut RngStream>,
    mode: Mode,
) -> Result<Var> {
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    match rng.as_deref_mut() {
        Some(stream) => tape.dropout(x, rate, stream, mode),
        None => Err(Error::BadConfig {
            detail: "train-mode dropout needs an entropy stream".into(),
        }),
    }
}
