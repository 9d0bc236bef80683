//! Transformer encoder over feature windows.
//!
//! Each window's steps are projected into the model width, tagged with a
//! sinusoidal position code, and passed through pre-norm encoder blocks:
//! `x + dropout(attention(norm(x)))` followed by `x + dropout(ffn(norm(x)))`.
//! The step outputs are mean-pooled over time and a tanh linear head maps
//! the pooled vector to one prediction per window. There is no final
//! normalization after the last block; the pooled residual stream feeds the
//! head directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    apply_dropout, init_weight, restore_named, unit_gain, zero_bias, Forecaster, LossGraph,
    WindowBatch,
};
use crate::error::{Error, Result};
use crate::tensor::rng::RngStream;
use crate::tensor::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { d_model: 64, heads: 8, blocks: 2, ffn_dim: 256, dropout: 0.1 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.blocks == 0 || self.ffn_dim == 0 {
            return Err(Error::BadConfig { detail: "zero transformer dimension".into() });
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::BadConfig {
                detail: format!("width {} not divisible by {} heads", self.d_model, self.heads),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::BadConfig {
                detail: format!("dropout rate {} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }
}

struct Block {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    ffn_w1: Tensor,
    ffn_b1: Tensor,
    ffn_w2: Tensor,
    ffn_b2: Tensor,
}

impl Block {
    fn new(d: usize, ffn: usize, rng: &mut RngStream) -> Self {
        Block {
            ln1_gain: unit_gain(d),
            ln1_bias: zero_bias(d),
            wq: init_weight(rng, d, d),
            bq: zero_bias(d),
            wk: init_weight(rng, d, d),
            bk: zero_bias(d),
            wv: init_weight(rng, d, d),
            bv: zero_bias(d),
            wo: init_weight(rng, d, d),
            bo: zero_bias(d),
            ln2_gain: unit_gain(d),
            ln2_bias: zero_bias(d),
            ffn_w1: init_weight(rng, d, ffn),
            ffn_b1: zero_bias(ffn),
            ffn_w2: init_weight(rng, ffn, d),
            ffn_b2: zero_bias(d),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("ffn_w1", &mut self.ffn_w1),
            ("ffn_b1", &mut self.ffn_b1),
            ("ffn_w2", &mut self.ffn_w2),
            ("ffn_b2", &mut self.ffn_b2),
        ]
    }
}

/// Row-major `[seq_len, d_model]` sinusoidal position code:
/// `sin(t / 10000^(2i/d))` in even columns, the matching cosine in odd ones.
pub fn sinusoidal_encoding(seq_len: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; seq_len * d_model];
    for t in 0..seq_len {
        for i in 0..d_model {
            let exponent = 2.0 * (i / 2) as f64 / d_model as f64;
            let angle = t as f64 / 10_000f64.powf(exponent);
            pe[t * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub struct TransformerModel {
    cfg: TransformerConfig,
    seq_len: usize,
    features: usize,
    in_w: Tensor,
    in_b: Tensor,
    blocks: Vec<Block>,
    head_w: Tensor,
    head_b: Tensor,
    position_code: Vec<f64>,
}

pub struct TransformerForward {
    pub pred: Var,
    pub leaves: Vec<Var>,
}

impl TransformerModel {
    pub fn new(
        seq_len: usize,
        features: usize,
        cfg: TransformerConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        if seq_len == 0 || features == 0 {
            return Err(Error::BadConfig { detail: "empty transformer input".into() });
        }
        let d = cfg.d_model;
        Ok(TransformerModel {
            cfg,
            seq_len,
            features,
            in_w: init_weight(rng, features, d),
            in_b: zero_bias(d),
            blocks: (0..cfg.blocks).map(|_| Block::new(d, cfg.ffn_dim, rng)).collect(),
            head_w: init_weight(rng, d, 1),
            head_b: zero_bias(1),
            position_code: sinusoidal_encoding(seq_len, d),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    fn position_tile(&self, batch: usize) -> Tensor {
        let mut data = Vec::with_capacity(batch * self.position_code.len());
        for _ in 0..batch {
            data.extend_from_slice(&self.position_code);
        }
        Tensor::new(vec![batch * self.seq_len, self.cfg.d_model], data).expect("tile shape")
    }

    pub fn forward(
        &self,
        tape: &Tape,
        batch: &WindowBatch,
        mut rng: Option<&mut RngStream>,
        mode: Mode,
    ) -> Result<TransformerForward> {
        if batch.seq_len() != self.seq_len || batch.features() != self.features {
            return Err(Error::ShapeMismatch {
                op: "transformer_forward",
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
        let mut leaves = Vec::with_capacity(4 + 16 * self.blocks.len());
        let in_w = bind(&self.in_w);
        let in_b = bind(&self.in_b);
        leaves.push(in_w);
        leaves.push(in_b);
        let blocks: Vec<[Var; 16]> = self
            .blocks
            .iter()
            .map(|blk| {
                let vars = blk.fields().map(|(_, t)| bind(t));
                leaves.extend_from_slice(&vars);
                vars
            })
            .collect();
        let head_w = bind(&self.head_w);
        let head_b = bind(&self.head_b);
        leaves.push(head_w);
        leaves.push(head_b);

        let x = tape.constant(batch.step_rows());
        let mut h = tape.add_bias(tape.matmul(x, in_w)?, in_b)?;
        h = tape.add(h, tape.constant(self.position_tile(batch.batch())))?;

        for vars in &blocks {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
                *vars;
            let normed = tape.layer_norm(h, ln1_g, ln1_b)?;
            let q = tape.add_bias(tape.matmul(normed, wq)?, bq)?;
            let k = tape.add_bias(tape.matmul(normed, wk)?, bk)?;
            let v = tape.add_bias(tape.matmul(normed, wv)?, bv)?;
            let attended = tape.attention(q, k, v, self.cfg.heads, self.seq_len)?;
            let projected = tape.add_bias(tape.matmul(attended, wo)?, bo)?;
            h = tape.add(h, apply_dropout(tape, projected, self.cfg.dropout, &mut rng, mode)?)?;

            let normed = tape.layer_norm(h, ln2_g, ln2_b)?;
            let inner = tape.relu(tape.add_bias(tape.matmul(normed, w1)?, b1)?);
            let expanded = tape.add_bias(tape.matmul(inner, w2)?, b2)?;
            h = tape.add(h, apply_dropout(tape, expanded, self.cfg.dropout, &mut rng, mode)?)?;
        }

        let pooled = tape.mean_pool_rows(h, self.seq_len)?;
        let pred = tape.tanh(tape.add_bias(tape.matmul(pooled, head_w)?, head_b)?);
        Ok(TransformerForward { pred, leaves })
    }
}

impl Forecaster for TransformerModel {
    fn name(&self) -> &'static str {
        "transformer"
    }

    fn build_loss(
        &mut self,
        tape: &Tape,
        batch: &WindowBatch,
        rng: Option<&mut RngStream>,
        mode: Mode,
    ) -> Result<LossGraph> {
        let fwd = self.forward(tape, batch, rng, mode)?;
        let targets = tape.constant(batch.targets_tensor());
        let loss = tape.mse_loss(fwd.pred, targets)?;
        Ok(LossGraph { loss, pred: fwd.pred, leaves: fwd.leaves })
    }

    fn predict(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, batch, None, Mode::Infer)?;
        let out = tape.value(fwd.pred).data().to_vec();
        Ok(out)
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(4 + 16 * self.blocks.len());
        out.push(("in_w".into(), &self.in_w));
        out.push(("in_b".into(), &self.in_b));
        for (i, blk) in self.blocks.iter().enumerate() {
            out.extend(blk.fields().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::with_capacity(4 + 16 * self.blocks.len());
        out.push(("in_w".into(), &mut self.in_w));
        out.push(("in_b".into(), &mut self.in_b));
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            out.extend(blk.fields_mut().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn restore(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        restore_named(self.params_mut(), Vec::new(), tensors)
    }
}
