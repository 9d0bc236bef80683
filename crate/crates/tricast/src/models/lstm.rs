//! Stacked bidirectional LSTM.
//!
//! Each layer runs one scan forward and one backward over the window; the
//! per-step hidden states of the two directions are concatenated (width
//! 2*hidden) and fed to the next layer, with dropout between layers. The
//! head concatenates the forward scan's last state with the backward
//! scan's first state (the two ends that have seen the whole window) and
//! maps them through a linear layer, batch normalization, and tanh.
//!
//! The input-side gate pre-activations `x_t W_x + b` are computed in one
//! matmul per direction; the recurrence over steps (including the
//! `h_{t-1} W_h` term, the gate nonlinearities, and backward-through-time)
//! runs inside the fused scan op of the tape. Forget gates start biased
//! open (+1) so early training can carry state across the window.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    apply_dropout, init_weight, restore_named, unit_gain, zero_bias, Forecaster, LossGraph,
    WindowBatch,
};
use crate::error::{Error, Result};
use crate::tensor::rng::RngStream;
use crate::tensor::tape::{BnState, Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { hidden_dim: 128, layers: 2, dropout: 0.2 }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::BadConfig { detail: "zero LSTM dimension".into() });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::BadConfig {
                detail: format!("dropout rate {} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }
}

struct Direction {
    w_x: Tensor,
    w_h: Tensor,
    b: Tensor,
}

impl Direction {
    fn new(input_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut b = zero_bias(4 * hidden);
        // Gate blocks are [forget | input | candidate | output].
        b.data_mut()[..hidden].fill(1.0);
        Direction {
            w_x: init_weight(rng, input_dim, 4 * hidden),
            w_h: init_weight(rng, hidden, 4 * hidden),
            b,
        }
    }
}

struct Layer {
    fwd: Direction,
    bwd: Direction,
}

pub struct LstmModel {
    cfg: LstmConfig,
    seq_len: usize,
    features: usize,
    layers: Vec<Layer>,
    head_w: Tensor,
    head_b: Tensor,
    bn_gain: Tensor,
    bn_bias: Tensor,
    bn: BnState,
}

pub struct LstmForward {
    pub pred: Var,
    pub leaves: Vec<Var>,
}

/// Bound parameter handles for one direction of one layer.
#[derive(Clone, Copy)]
struct DirVars {
    w_x: Var,
    w_h: Var,
    b: Var,
}

impl LstmModel {
    pub fn new(
        seq_len: usize,
        features: usize,
        cfg: LstmConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        if seq_len == 0 || features == 0 {
            return Err(Error::BadConfig { detail: "empty LSTM input".into() });
        }
        let h = cfg.hidden_dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let input_dim = if l == 0 { features } else { 2 * h };
                Layer {
                    fwd: Direction::new(input_dim, h, rng),
                    bwd: Direction::new(input_dim, h, rng),
                }
            })
            .collect();
        Ok(LstmModel {
            cfg,
            seq_len,
            features,
            layers,
            head_w: init_weight(rng, 2 * h, 1),
            head_b: zero_bias(1),
            bn_gain: unit_gain(1),
            bn_bias: zero_bias(1),
            bn: BnState::new(1, 0.1),
        })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.cfg
    }

    /// One directional scan. `input` is time-major `[seq*batch, in_dim]`;
    /// the result holds every step's hidden state in the same layout.
    fn scan(tape: &Tape, input: Var, dir: DirVars, batch: usize, reverse: bool) -> Result<Var> {
        let pre_all = tape.add_bias(tape.matmul(input, dir.w_x)?, dir.b)?;
        tape.lstm_scan(pre_all, dir.w_h, batch, reverse)
    }

    /// Full forward pass against an explicit normalization state, so train
    /// and inference callers control whether running statistics move.
    fn forward(
        &self,
        tape: &Tape,
        batch: &WindowBatch,
        mut rng: Option<&mut RngStream>,
        mode: Mode,
        bn: &mut BnState,
    ) -> Result<LstmForward> {
        if batch.seq_len() != self.seq_len || batch.features() != self.features {
            return Err(Error::ShapeMismatch {
                op: "lstm_forward",
                detail: format!(
                    "window {}x{} vs model {}x{}",
                    batch.seq_len(),
                    batch.features(),
                    self.seq_len,
                    self.features
                ),
            });
        }
        let bind = |t: &Tensor| match mode {
            Mode::Train => tape.leaf(t.clone()),
            Mode::Infer => tape.constant(t.clone()),
        };
        let mut leaves = Vec::with_capacity(6 * self.layers.len() + 4);
        let mut layer_vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let dir_vars = [&layer.fwd, &layer.bwd].map(|dir| DirVars {
                w_x: bind(&dir.w_x),
                w_h: bind(&dir.w_h),
                b: bind(&dir.b),
            });
            for v in &dir_vars {
                leaves.extend([v.w_x, v.w_h, v.b]);
            }
            layer_vars.push(dir_vars);
        }
        let head_w = bind(&self.head_w);
        let head_b = bind(&self.head_b);
        let bn_gain = bind(&self.bn_gain);
        let bn_bias = bind(&self.bn_bias);
        leaves.extend([head_w, head_b, bn_gain, bn_bias]);

        let (b, t_len) = (batch.batch(), self.seq_len);
        let mut input = tape.constant(batch.time_major_rows());
        let mut last = None;
        for (l, dirs) in layer_vars.iter().enumerate() {
            let h_f = Self::scan(tape, input, dirs[0], b, false)?;
            let h_b = Self::scan(tape, input, dirs[1], b, true)?;
            last = Some((h_f, h_b));
            if l + 1 < self.layers.len() {
                let merged = tape.concat_cols(&[h_f, h_b])?;
                input = apply_dropout(tape, merged, self.cfg.dropout, &mut rng, mode)?;
            }
        }
        let (h_f, h_b) = last.expect("at least one layer");
        // The two scan ends that have consumed the whole window.
        let fwd_end = tape.slice_rows(h_f, (t_len - 1) * b, b)?;
        let bwd_end = tape.slice_rows(h_b, 0, b)?;

        let summary = tape.concat_cols(&[fwd_end, bwd_end])?;
        let lin = tape.add_bias(tape.matmul(summary, head_w)?, head_b)?;
        let normed = tape.batch_norm(lin, bn_gain, bn_bias, bn, mode)?;
        let pred = tape.tanh(normed);
        Ok(LstmForward { pred, leaves })
    }
}

impl Forecaster for LstmModel {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn build_loss(
        &mut self,
        tape: &Tape,
        batch: &WindowBatch,
        rng: Option<&mut RngStream>,
        mode: Mode,
    ) -> Result<LossGraph> {
        let mut bn = self.bn.clone();
        let fwd = self.forward(tape, batch, rng, mode, &mut bn)?;
        self.bn = bn;
        let targets = tape.constant(batch.targets_tensor());
        let loss = tape.mse_loss(fwd.pred, targets)?;
        Ok(LossGraph { loss, pred: fwd.pred, leaves: fwd.leaves })
    }

    fn predict(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let mut bn = self.bn.clone();
        let fwd = self.forward(&tape, batch, None, Mode::Infer, &mut bn)?;
        let out = tape.value(fwd.pred).data().to_vec();
        Ok(out)
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(6 * self.layers.len() + 4);
        for (l, layer) in self.layers.iter().enumerate() {
            for (tag, dir) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                out.push((format!("layers.{l}.{tag}.w_x"), &dir.w_x));
                out.push((format!("layers.{l}.{tag}.w_h"), &dir.w_h));
                out.push((format!("layers.{l}.{tag}.b"), &dir.b));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out.push(("bn_gain".into(), &self.bn_gain));
        out.push(("bn_bias".into(), &self.bn_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::with_capacity(6 * self.layers.len() + 4);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (tag, dir) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                out.push((format!("layers.{l}.{tag}.w_x"), &mut dir.w_x));
                out.push((format!("layers.{l}.{tag}.w_h"), &mut dir.w_h));
                out.push((format!("layers.{l}.{tag}.b"), &mut dir.b));
            }
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out.push(("bn_gain".into(), &mut self.bn_gain));
        out.push(("bn_bias".into(), &mut self.bn_bias));
        out
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        vec![
            (
                "bn.running_mean".into(),
                Tensor::new(vec![1], self.bn.running_mean.clone()).expect("channel count"),
            ),
            (
                "bn.running_var".into(),
                Tensor::new(vec![1], self.bn.running_var.clone()).expect("channel count"),
            ),
        ]
    }

    fn restore(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let LstmModel { layers, head_w, head_b, bn_gain, bn_bias, bn, .. } = self;
        let mut expected: Vec<(String, &mut Tensor)> = Vec::new();
        for (l, layer) in layers.iter_mut().enumerate() {
            for (tag, dir) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                expected.push((format!("layers.{l}.{tag}.w_x"), &mut dir.w_x));
                expected.push((format!("layers.{l}.{tag}.w_h"), &mut dir.w_h));
                expected.push((format!("layers.{l}.{tag}.b"), &mut dir.b));
            }
        }
        expected.push(("head_w".into(), head_w));
        expected.push(("head_b".into(), head_b));
        expected.push(("bn_gain".into(), bn_gain));
        expected.push(("bn_bias".into(), bn_bias));
        let buffers = vec![
            ("bn.running_mean".to_string(), &mut bn.running_mean),
            ("bn.running_var".to_string(), &mut bn.running_var),
        ];
        restore_named(expected, buffers, tensors)
    }
}
