//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Operations execute eagerly: each builder computes its output tensor
//! immediately and records a node referencing its inputs by index, so the
//! node order is already a topological order and `backward` is a single
//! reverse sweep. Gradients accumulate lazily (a node allocates its buffer
//! the first time something flows into it) and subgraphs that cannot reach a
//! trainable leaf are skipped entirely.
//!
//! A few deliberately fused primitives ([`Tape::attention`],
//! [`Tape::lstm_cell`], [`Tape::lstm_scan`]) implement their textbook
//! backward rules in one node each; decomposing them into elementwise ops
//! would multiply node count and peak memory on the training hot path. All
//! are covered by the same finite-difference gradient suite as the simple
//! primitives, and the fused scan is additionally pinned against the
//! step-by-step cell composition.
//!
//! Forward outputs are finiteness-checked under debug assertions; release
//! builds guard the loss value in [`Tape::backward`] and rely on callers
//! checking exported values, since a NaN anywhere propagates to the loss.

use std::cell::{Ref, RefCell};

use super::gemm::{dgemm, Trans};
use super::rng::RngStream;
use super::Tensor;
use crate::error::{Error, Result};

/// Epsilon inside layer-norm and batch-norm denominators.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Whether stochastic layers (dropout, batch statistics) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BnState {
    pub fn new(channels: usize, momentum: f64) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Matmul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
    KlNormal(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<f64>, mean: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, train: bool, inv_std: Vec<f64>, mean: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, offset: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceAddRows { big: Var, offset: usize, small: Var },
    MeanPoolRows { x: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: Vec<f64> },
    LstmCell { pre: Var, prev: Option<Var>, gates: Vec<f64>, tanh_c: Vec<f64> },
    LstmScan { pre: Var, w_h: Var, batch: usize, reverse: bool, gates: Vec<f64>, c: Vec<f64>, tanh_c: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

use super::math::{exp_slice, sigmoid, sigmoid_slice, tanh_slice};

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    // Non-finite forward values are allowed through: a diverging model is a
    // runtime condition the trainer detects from the loss, not a tape bug.
    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, grad: None, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Registers a tensor as a leaf; it participates in gradient
    /// accumulation iff `requires_grad` is set on it.
    pub fn leaf(&self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Registers a constant leaf regardless of the tensor's own flag.
    pub fn constant(&self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    /// Borrow of a recorded value. The borrow must be released before the
    /// next tape operation.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar payload of a length-1 value.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Removes and returns the accumulated gradient of a leaf after
    /// [`Tape::backward`]. `None` when no gradient reached it.
    pub fn take_grad(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow_mut()[v.0].grad.take()
    }

    // ----- element-wise arithmetic -----

    fn binary_same_shape(&self, op_name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok((ta.shape().to_vec(), ta.data().to_vec(), tb.data().to_vec()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, out)?, needs))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, out)?, needs))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, out)?, needs))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let (shape, data, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (
                t.shape().to_vec(),
                t.data().iter().map(|v| v * factor).collect::<Vec<f64>>(),
                nodes[x.0].needs_grad,
            )
        };
        self.push(Op::Scale(x, factor), Tensor::new(shape, data).expect("same shape"), needs)
    }

    /// Adds a length-`c` bias vector to every row of an `r x c` value.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, out, needs) = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            if tx.shape().len() != 2 || tb.len() != tx.cols() {
                return Err(shape_err(
                    "add_bias",
                    format!("{:?} with bias {:?}", tx.shape(), tb.shape()),
                ));
            }
            let cols = tx.cols();
            let mut out = tx.data().to_vec();
            for row in out.chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(tb.data()) {
                    *v += b;
                }
            }
            (tx.shape().to_vec(), out, nodes[x.0].needs_grad || nodes[bias.0].needs_grad)
        };
        Ok(self.push(Op::AddBias(x, bias), Tensor::new(shape, out)?, needs))
    }

    // ----- linear algebra -----

    /// Matrix product of an `m x k` and a `k x n` value.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, n, out, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", ta.shape(), tb.shape()),
                ));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut out = vec![0.0; m * n];
            dgemm(Trans::No, Trans::No, m, n, k, 1.0, ta.data(), k, tb.data(), n, 0.0, &mut out, n);
            (m, n, out, nodes[a.0].needs_grad || nodes[b.0].needs_grad)
        };
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?, needs))
    }

    // ----- activations -----

    fn unary(&self, x: Var, op: fn(Var) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let (shape, data, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (
                t.shape().to_vec(),
                t.data().iter().map(|&v| f(v)).collect::<Vec<f64>>(),
                nodes[x.0].needs_grad,
            )
        };
        self.push(op(x), Tensor::new(shape, data).expect("same shape"), needs)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh, super::math::tanh)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Elementwise exponential; arguments saturate at ±700 (see
    /// [`super::math::exp`]).
    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp, super::math::exp)
    }

    /// Row-wise softmax over the last axis of a rank-2 value, computed with
    /// max-subtraction for stability.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (shape, data, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 || t.cols() == 0 {
                return Err(shape_err("softmax", format!("need non-empty rows, got {:?}", t.shape())));
            }
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(t.cols()) {
                softmax_row(row);
            }
            (t.shape().to_vec(), data, nodes[x.0].needs_grad)
        };
        Ok(self.push(Op::Softmax(x), Tensor::new(shape, data)?, needs))
    }

    // ----- reductions and losses -----

    pub fn sum(&self, x: Var) -> Var {
        let (total, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.data().iter().sum::<f64>(), nodes[x.0].needs_grad)
        };
        self.push(Op::Sum(x), Tensor::scalar(total), needs)
    }

    pub fn mean(&self, x: Var) -> Var {
        let (avg, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (t.data().iter().sum::<f64>() / t.len() as f64, nodes[x.0].needs_grad)
        };
        self.push(Op::Mean(x), Tensor::scalar(avg), needs)
    }

    /// Mean squared error over every element of two same-shaped values.
    pub fn mse_loss(&self, a: Var, b: Var) -> Result<Var> {
        let (_, da, db) = self.binary_same_shape("mse_loss", a, b)?;
        let n = da.len() as f64;
        let mse = da.iter().zip(&db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MseLoss(a, b), Tensor::scalar(mse), needs))
    }

    /// KL divergence of a diagonal Gaussian `N(mu, exp(logvar))` from the
    /// standard normal: `0.5 * sum_j(mu^2 + exp(lv) - 1 - lv)` per sample,
    /// averaged over the batch (rows).
    pub fn kl_normal(&self, mu: Var, logvar: Var) -> Result<Var> {
        let (shape, dm, dl) = self.binary_same_shape("kl_normal", mu, logvar)?;
        if shape.len() != 2 {
            return Err(shape_err("kl_normal", format!("need rank 2, got {shape:?}")));
        }
        let batch = shape[0] as f64;
        let kl = dm
            .iter()
            .zip(&dl)
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum::<f64>()
            / batch;
        let needs = self.needs(mu) || self.needs(logvar);
        Ok(self.push(Op::KlNormal(mu, logvar), Tensor::scalar(kl), needs))
    }

    // ----- normalization and regularization -----

    /// Per-row normalization to zero mean and unit variance (population
    /// form) followed by an affine `gain`/`bias`, with `sqrt(var + 1e-5)`
    /// in the denominator.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (shape, out, mean, inv_std, needs) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            if tx.shape().len() != 2 || tg.len() != tx.cols() || tb.len() != tx.cols() {
                return Err(shape_err(
                    "layer_norm",
                    format!("{:?} with gain {:?} bias {:?}", tx.shape(), tg.shape(), tb.shape()),
                ));
            }
            let cols = tx.cols();
            let mut out = vec![0.0; tx.len()];
            let mut mean = vec![0.0; tx.rows()];
            let mut inv_std = vec![0.0; tx.rows()];
            for (r, row) in tx.data().chunks(cols).enumerate() {
                let mu = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                mean[r] = mu;
                inv_std[r] = inv;
                for (c, &v) in row.iter().enumerate() {
                    out[r * cols + c] = tg.data()[c] * ((v - mu) * inv) + tb.data()[c];
                }
            }
            let needs = nodes[x.0].needs_grad || nodes[gain.0].needs_grad || nodes[bias.0].needs_grad;
            (tx.shape().to_vec(), out, mean, inv_std, needs)
        };
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, inv_std, mean },
            Tensor::new(shape, out)?,
            needs,
        ))
    }

    /// Per-column batch normalization of a `batch x channels` value.
    ///
    /// Train mode normalizes by batch statistics (population variance) and
    /// updates `state` in place with momentum
    /// (`running = (1-m)*running + m*batch`); it requires a batch of at
    /// least 2. Infer mode is a fixed affine map using the running
    /// statistics and never touches `state`.
    pub fn batch_norm(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        let (shape, out, mean, inv_std, needs) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            if tx.shape().len() != 2
                || tg.len() != tx.cols()
                || tb.len() != tx.cols()
                || state.running_mean.len() != tx.cols()
            {
                return Err(shape_err(
                    "batch_norm",
                    format!("{:?} with {} channels", tx.shape(), state.running_mean.len()),
                ));
            }
            let (rows, cols) = (tx.rows(), tx.cols());
            if mode == Mode::Train && rows < 2 {
                return Err(shape_err("batch_norm", "train mode needs batch size >= 2".into()));
            }
            let (mut mean, mut var) = (vec![0.0; cols], vec![0.0; cols]);
            match mode {
                Mode::Train => {
                    for row in tx.data().chunks(cols) {
                        for (c, &v) in row.iter().enumerate() {
                            mean[c] += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    for row in tx.data().chunks(cols) {
                        for (c, &v) in row.iter().enumerate() {
                            var[c] += (v - mean[c]) * (v - mean[c]);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows as f64);
                    let m = state.momentum;
                    for c in 0..cols {
                        state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean[c];
                        state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var[c];
                    }
                }
                Mode::Infer => {
                    mean.copy_from_slice(&state.running_mean);
                    var.copy_from_slice(&state.running_var);
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let mut out = vec![0.0; tx.len()];
            for (r, row) in tx.data().chunks(cols).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    out[r * cols + c] = tg.data()[c] * ((v - mean[c]) * inv_std[c]) + tb.data()[c];
                }
            }
            let needs = nodes[x.0].needs_grad || nodes[gain.0].needs_grad || nodes[bias.0].needs_grad;
            (tx.shape().to_vec(), out, mean, inv_std, needs)
        };
        Ok(self.push(
            Op::BatchNorm { x, gain, bias, train: mode == Mode::Train, inv_std, mean },
            Tensor::new(shape, out)?,
            needs,
        ))
    }

    /// Inference-mode batch norm against immutable running statistics;
    /// behaviour matches [`Tape::batch_norm`] with [`Mode::Infer`].
    pub fn batch_norm_infer(&self, x: Var, gain: Var, bias: Var, state: &BnState) -> Result<Var> {
        let mut scratch = state.clone();
        self.batch_norm(x, gain, bias, &mut scratch, Mode::Infer)
    }

    /// Inverted dropout: train mode zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`; infer mode (or rate 0)
    /// is the identity and records nothing.
    pub fn dropout(&self, x: Var, rate: f64, rng: &mut RngStream, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::BadConfig { detail: format!("dropout rate {rate} outside [0, 1)") });
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let (shape, out, mask, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let mask = rng.dropout_mask(t.len(), rate);
            let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (t.shape().to_vec(), out, mask, nodes[x.0].needs_grad)
        };
        Ok(self.push(Op::Dropout { x, mask }, Tensor::new(shape, out)?, needs))
    }

    // ----- structural ops -----

    /// Copy of columns `start..start+len` of a rank-2 value.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, out, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 || start + len > t.cols() {
                return Err(shape_err(
                    "slice_cols",
                    format!("cols {}..{} of {:?}", start, start + len, t.shape()),
                ));
            }
            let cols = t.cols();
            let mut out = Vec::with_capacity(t.rows() * len);
            for row in t.data().chunks(cols) {
                out.extend_from_slice(&row[start..start + len]);
            }
            (t.rows(), out, nodes[x.0].needs_grad)
        };
        Ok(self.push(Op::SliceCols { x, start, len }, Tensor::new(vec![rows, len], out)?, needs))
    }

    /// Copy of rows `offset..offset+rows` of a rank-2 value.
    pub fn slice_rows(&self, x: Var, offset: usize, rows: usize) -> Result<Var> {
        let (cols, out, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 || offset + rows > t.rows() {
                return Err(shape_err(
                    "slice_rows",
                    format!("rows {}..{} of {:?}", offset, offset + rows, t.shape()),
                ));
            }
            let cols = t.cols();
            let out = t.data()[offset * cols..(offset + rows) * cols].to_vec();
            (cols, out, nodes[x.0].needs_grad)
        };
        Ok(self.push(Op::SliceRows { x, offset }, Tensor::new(vec![rows, cols], out)?, needs))
    }

    /// Horizontal concatenation of rank-2 values with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (rows, total_cols, out, needs) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut total = 0usize;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape().len() != 2 || t.rows() != rows {
                    return Err(shape_err("concat_cols", format!("row mismatch at {:?}", t.shape())));
                }
                total += t.cols();
            }
            let mut out = vec![0.0; rows * total];
            let mut col = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                let c = t.cols();
                for r in 0..rows {
                    out[r * total + col..r * total + col + c]
                        .copy_from_slice(&t.data()[r * c..r * c + c]);
                }
                col += c;
            }
            (rows, total, out, parts.iter().any(|p| nodes[p.0].needs_grad))
        };
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![rows, total_cols], out)?, needs))
    }

    /// Vertical concatenation of rank-2 values with equal column counts.
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var> {
        let (rows, cols, out, needs) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut out = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape().len() != 2 || t.cols() != cols {
                    return Err(shape_err("stack_rows", format!("col mismatch at {:?}", t.shape())));
                }
                rows += t.rows();
                out.extend_from_slice(t.data());
            }
            (rows, cols, out, parts.iter().any(|p| nodes[p.0].needs_grad))
        };
        Ok(self.push(Op::StackRows(parts.to_vec()), Tensor::new(vec![rows, cols], out)?, needs))
    }

    /// `big[offset .. offset + small.rows] + small`, leaving `big` itself
    /// untouched. Used to add a per-step slice of a precomputed projection
    /// to a recurrent contribution without copying the big operand.
    pub fn slice_add_rows(&self, big: Var, offset: usize, small: Var) -> Result<Var> {
        let (shape, out, needs) = {
            let nodes = self.nodes.borrow();
            let (tb, ts) = (&nodes[big.0].value, &nodes[small.0].value);
            if tb.shape().len() != 2
                || ts.shape().len() != 2
                || tb.cols() != ts.cols()
                || offset + ts.rows() > tb.rows()
            {
                return Err(shape_err(
                    "slice_add_rows",
                    format!("rows {}+{:?} of {:?}", offset, ts.shape(), tb.shape()),
                ));
            }
            let cols = tb.cols();
            let base = &tb.data()[offset * cols..(offset + ts.rows()) * cols];
            let out: Vec<f64> = base.iter().zip(ts.data()).map(|(a, b)| a + b).collect();
            (ts.shape().to_vec(), out, nodes[big.0].needs_grad || nodes[small.0].needs_grad)
        };
        Ok(self.push(Op::SliceAddRows { big, offset, small }, Tensor::new(shape, out)?, needs))
    }

    /// Means over consecutive groups of `group` rows: a `(b*group) x c`
    /// value becomes `b x c`. Used to pool per-step states over time.
    pub fn mean_pool_rows(&self, x: Var, group: usize) -> Result<Var> {
        let (out_rows, cols, out, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 || group == 0 || t.rows() % group != 0 {
                return Err(shape_err(
                    "mean_pool_rows",
                    format!("{:?} not divisible into groups of {}", t.shape(), group),
                ));
            }
            let (cols, out_rows) = (t.cols(), t.rows() / group);
            let mut out = vec![0.0; out_rows * cols];
            for (r, row) in t.data().chunks(cols).enumerate() {
                let o = r / group;
                for (c, &v) in row.iter().enumerate() {
                    out[o * cols + c] += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= group as f64);
            (out_rows, cols, out, nodes[x.0].needs_grad)
        };
        Ok(self.push(Op::MeanPoolRows { x, group }, Tensor::new(vec![out_rows, cols], out)?, needs))
    }

    // ----- fused model primitives -----

    /// Multi-head scaled dot-product attention over batch-major sequences.
    ///
    /// `q`, `k`, `v` are `(batch*seq) x d` with row `b*seq + t`; the head
    /// dimension is `d / heads` and each head attends within its own column
    /// block, so the output layout is already the concatenation of heads.
    /// Computes `softmax(Q Kᵀ / sqrt(d_head)) V` per (batch, head) and
    /// caches the attention probabilities for the backward pass (they are
    /// also exposed via the returned probabilities handle of
    /// [`Tape::attention_with_probs`]).
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        Ok(self.attention_impl(q, k, v, heads, seq, false)?.0)
    }

    /// Like [`Tape::attention`], additionally returning the attention
    /// probabilities as a `(batch*heads*seq) x seq` tensor for inspection.
    pub fn attention_with_probs(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
    ) -> Result<(Var, Tensor)> {
        let (var, probs) = self.attention_impl(q, k, v, heads, seq, true)?;
        Ok((var, probs.expect("probs requested")))
    }

    fn attention_impl(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        want_probs: bool,
    ) -> Result<(Var, Option<Tensor>)> {
        let (rows, d, out, mut probs, needs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
                return Err(shape_err(
                    "attention",
                    format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
                ));
            }
            if tq.shape().len() != 2 || heads == 0 || tq.cols() % heads != 0 {
                return Err(shape_err(
                    "attention",
                    format!("width {} not divisible by {} heads", tq.cols(), heads),
                ));
            }
            if seq == 0 || tq.rows() % seq != 0 {
                return Err(shape_err(
                    "attention",
                    format!("{} rows not divisible by seq {}", tq.rows(), seq),
                ));
            }
            let (rows, d) = (tq.rows(), tq.cols());
            let dh = d / heads;
            let batch = rows / seq;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = vec![0.0; rows * d];
            let mut probs = vec![0.0; batch * heads * seq * seq];
            let mut scores = vec![0.0; seq * seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    dgemm(
                        Trans::No,
                        Trans::Yes,
                        seq,
                        seq,
                        dh,
                        scale,
                        &tq.data()[off..],
                        d,
                        &tk.data()[off..],
                        d,
                        0.0,
                        &mut scores,
                        seq,
                    );
                    for row in scores.chunks_mut(seq) {
                        softmax_row(row);
                    }
                    let p_off = (b * heads + h) * seq * seq;
                    probs[p_off..p_off + seq * seq].copy_from_slice(&scores);
                    dgemm(
                        Trans::No,
                        Trans::No,
                        seq,
                        dh,
                        seq,
                        1.0,
                        &scores,
                        seq,
                        &tv.data()[off..],
                        d,
                        0.0,
                        &mut out[off..],
                        d,
                    );
                }
            }
            let needs =
                nodes[q.0].needs_grad || nodes[k.0].needs_grad || nodes[v.0].needs_grad;
            (rows, d, out, probs, needs)
        };
        let probs_tensor = want_probs
            .then(|| Tensor::new(vec![probs.len() / seq, seq], probs.clone()).expect("probs shape"));
        if !needs {
            // The cached probabilities only serve the backward pass.
            probs = Vec::new();
        }
        let var = self.push(
            Op::Attention { q, k, v, heads, seq, probs },
            Tensor::new(vec![rows, d], out)?,
            needs,
        );
        Ok((var, probs_tensor))
    }

    /// One step of every sequence in a batch through an LSTM cell.
    ///
    /// `pre` is the `batch x 4*hidden` pre-activation `W·[h_prev, x] + b`
    /// (computed outside via matmuls), laid out as the four gate blocks
    /// `[forget | input | candidate | output]`. `prev` is the previous
    /// step's cell output (or `None` for an all-zero initial state). The
    /// output is `batch x 2*hidden`, columns `[h | c]`, so the next step
    /// reads its `c_{t-1}` from the right half and its `h_{t-1}` from the
    /// left half.
    ///
    /// Gate algebra: `f,i,o = sigmoid(pre_f,pre_i,pre_o)`,
    /// `g = tanh(pre_g)`, `c = f*c_prev + i*g`, `h = o*tanh(c)`.
    pub fn lstm_cell(&self, pre: Var, prev: Option<Var>) -> Result<Var> {
        let (batch, hidden, out, gates, tanh_c, needs) = {
            let nodes = self.nodes.borrow();
            let tp = &nodes[pre.0].value;
            if tp.shape().len() != 2 || tp.cols() % 4 != 0 {
                return Err(shape_err("lstm_cell", format!("pre-activation {:?}", tp.shape())));
            }
            let (batch, hidden) = (tp.rows(), tp.cols() / 4);
            if let Some(p) = prev {
                let t = &nodes[p.0].value;
                if t.shape() != [batch, 2 * hidden] {
                    return Err(shape_err(
                        "lstm_cell",
                        format!("prev {:?} for batch {} hidden {}", t.shape(), batch, hidden),
                    ));
                }
            }
            let prev_data = prev.map(|p| nodes[p.0].value.data());
            let mut gates = tp.data().to_vec();
            let mut tanh_c = vec![0.0; batch * hidden];
            let mut out = vec![0.0; batch * 2 * hidden];
            for b in 0..batch {
                let grow = &mut gates[b * 4 * hidden..(b + 1) * 4 * hidden];
                // Forget and input gates are adjacent: one sigmoid pass.
                let (fi, rest) = grow.split_at_mut(2 * hidden);
                let (g, o) = rest.split_at_mut(hidden);
                sigmoid_slice(fi);
                tanh_slice(g);
                sigmoid_slice(o);

                let orow = &mut out[b * 2 * hidden..(b + 1) * 2 * hidden];
                let (h_half, c_half) = orow.split_at_mut(hidden);
                match prev_data {
                    Some(d) => {
                        let c_prev = &d[b * 2 * hidden + hidden..(b + 1) * 2 * hidden];
                        for j in 0..hidden {
                            c_half[j] = fi[j] * c_prev[j] + fi[hidden + j] * g[j];
                        }
                    }
                    None => {
                        for j in 0..hidden {
                            c_half[j] = fi[hidden + j] * g[j];
                        }
                    }
                }
                let tc = &mut tanh_c[b * hidden..(b + 1) * hidden];
                tc.copy_from_slice(c_half);
                tanh_slice(tc);
                for j in 0..hidden {
                    h_half[j] = o[j] * tc[j];
                }
            }
            let needs = nodes[pre.0].needs_grad
                || prev.map(|p| nodes[p.0].needs_grad).unwrap_or(false);
            if !needs {
                // The activation caches only serve the backward pass.
                gates = Vec::new();
                tanh_c = Vec::new();
            }
            (batch, hidden, out, gates, tanh_c, needs)
        };
        Ok(self.push(
            Op::LstmCell { pre, prev, gates, tanh_c },
            Tensor::new(vec![batch, 2 * hidden], out)?,
            needs,
        ))
    }

    /// Full recurrent sweep of one LSTM direction in a single op.
    ///
    /// `pre` holds the input-side pre-activations `x_t·W_x + b` for every
    /// step, time-major as `(steps*batch) x 4*hidden` with row `t*batch + b`
    /// and the same gate block order as [`Tape::lstm_cell`]. `w_h` is the
    /// `hidden x 4*hidden` recurrent weight; initial hidden and cell states
    /// are zero. Returns every step's hidden state, `(steps*batch) x hidden`
    /// in the same time-major layout. `reverse` runs the recurrence from the
    /// last step backwards (step `t`'s state still lands at row `t*batch+b`).
    ///
    /// Equivalent to chaining [`Tape::lstm_cell`] across the steps (the unit
    /// tests pin that equivalence), but with one accumulating matmul per step
    /// into a preallocated gate buffer and the whole backward-through-time
    /// sweep inside one node, which avoids per-step tape traffic.
    pub fn lstm_scan(&self, pre: Var, w_h: Var, batch: usize, reverse: bool) -> Result<Var> {
        let (rows, hidden, out, gates, c, tanh_c, needs) = {
            let nodes = self.nodes.borrow();
            let tp = &nodes[pre.0].value;
            let tw = &nodes[w_h.0].value;
            if tp.shape().len() != 2 || tp.cols() % 4 != 0 || batch == 0 || tp.rows() % batch != 0
            {
                return Err(shape_err(
                    "lstm_scan",
                    format!("pre-activation {:?} for batch {}", tp.shape(), batch),
                ));
            }
            let hidden = tp.cols() / 4;
            if tw.shape() != [hidden, 4 * hidden] {
                return Err(shape_err(
                    "lstm_scan",
                    format!("recurrent weight {:?} for hidden {}", tw.shape(), hidden),
                ));
            }
            let steps = tp.rows() / batch;
            let gw = 4 * hidden;
            let whv = tw.data();
            let mut gates = tp.data().to_vec();
            let mut c = vec![0.0; steps * batch * hidden];
            let mut tanh_c = vec![0.0; steps * batch * hidden];
            let mut out = vec![0.0; steps * batch * hidden];
            for s in 0..steps {
                let t = if reverse { steps - 1 - s } else { s };
                let t_prev = (s > 0).then(|| if reverse { t + 1 } else { t - 1 });
                if let Some(ti) = t_prev {
                    // gates_t += h_prev · w_h, accumulated straight into the
                    // preloaded input-side block.
                    dgemm(
                        Trans::No, Trans::No, batch, gw, hidden,
                        1.0, &out[ti * batch * hidden..(ti + 1) * batch * hidden], hidden,
                        whv, gw,
                        1.0, &mut gates[t * batch * gw..(t + 1) * batch * gw], gw,
                    );
                }
                for b in 0..batch {
                    let row = (t * batch + b) * hidden;
                    let grow = &mut gates[(t * batch + b) * gw..(t * batch + b + 1) * gw];
                    let (fi, rest) = grow.split_at_mut(2 * hidden);
                    let (gg, o) = rest.split_at_mut(hidden);
                    sigmoid_slice(fi);
                    tanh_slice(gg);
                    sigmoid_slice(o);
                    for j in 0..hidden {
                        let c_prev = match t_prev {
                            Some(ti) => c[(ti * batch + b) * hidden + j],
                            None => 0.0,
                        };
                        c[row + j] = fi[j] * c_prev + fi[hidden + j] * gg[j];
                    }
                    let tc = &mut tanh_c[row..row + hidden];
                    tc.copy_from_slice(&c[row..row + hidden]);
                    tanh_slice(tc);
                    let hrow = &mut out[row..row + hidden];
                    for j in 0..hidden {
                        hrow[j] = o[j] * tc[j];
                    }
                }
            }
            let needs = nodes[pre.0].needs_grad || nodes[w_h.0].needs_grad;
            if !needs {
                // The caches only serve the backward pass.
                gates = Vec::new();
                c = Vec::new();
                tanh_c = Vec::new();
            }
            (steps * batch, hidden, out, gates, c, tanh_c, needs)
        };
        Ok(self.push(
            Op::LstmScan { pre, w_h, batch, reverse, gates, c, tanh_c },
            Tensor::new(vec![rows, hidden], out)?,
            needs,
        ))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad`
    /// leaves stay on the tape afterwards and are collected with
    /// [`Tape::take_grad`]; interior gradients are freed as the sweep
    /// passes them.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let ln = &nodes[loss.0];
        if !ln.value.is_scalar() {
            return Err(shape_err("backward", format!("loss has shape {:?}", ln.value.shape())));
        }
        if !ln.value.item().is_finite() {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let (head, tail) = nodes.split_at_mut(idx);
            let node = &mut tail[0];
            if !node.needs_grad {
                node.grad = None;
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backward_step(&node.op, &node.value, &g, head);
            if matches!(node.op, Op::Leaf) {
                node.grad = Some(g);
            }
        }
        Ok(())
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v -= max;
    }
    exp_slice(row);
    let total: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Gradient buffer of an upstream node, allocated on first use; `None` when
/// the node does not require gradients (its subgraph is constant).
fn grad_buf<'a>(head: &'a mut [Node], v: Var) -> Option<&'a mut [f64]> {
    let node = &mut head[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backward_step(op: &Op, value: &Tensor, g: &[f64], head: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(da) = grad_buf(head, *a) {
                da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            if let Some(db) = grad_buf(head, *b) {
                db.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = grad_buf(head, *a) {
                da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            if let Some(db) = grad_buf(head, *b) {
                db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
            }
        }
        Op::Mul(a, b) => {
            if head[a.0].needs_grad {
                let bv = head[b.0].value.data().to_vec();
                let da = grad_buf(head, *a).expect("checked");
                da.iter_mut().zip(g.iter().zip(&bv)).for_each(|(d, (gv, b))| *d += gv * b);
            }
            if head[b.0].needs_grad {
                let av = head[a.0].value.data().to_vec();
                let db = grad_buf(head, *b).expect("checked");
                db.iter_mut().zip(g.iter().zip(&av)).for_each(|(d, (gv, a))| *d += gv * a);
            }
        }
        Op::Scale(x, factor) => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += factor * gv);
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            if head[bias.0].needs_grad {
                let cols = head[bias.0].value.len();
                let db = grad_buf(head, *bias).expect("checked");
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (head[a.0].value.rows(), head[a.0].value.cols());
            let n = head[b.0].value.cols();
            if head[a.0].needs_grad {
                let bv = head[b.0].value.data().to_vec();
                let da = grad_buf(head, *a).expect("checked");
                dgemm(Trans::No, Trans::Yes, m, k, n, 1.0, g, n, &bv, n, 1.0, da, k);
            }
            if head[b.0].needs_grad {
                let av = head[a.0].value.data().to_vec();
                let db = grad_buf(head, *b).expect("checked");
                dgemm(Trans::Yes, Trans::No, k, n, m, 1.0, &av, k, g, n, 1.0, db, n);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut()
                    .zip(g.iter().zip(value.data()))
                    .for_each(|(d, (gv, y))| *d += gv * y * (1.0 - y));
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut()
                    .zip(g.iter().zip(value.data()))
                    .for_each(|(d, (gv, y))| *d += gv * (1.0 - y * y));
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut()
                    .zip(g.iter().zip(value.data()))
                    .for_each(|(d, (gv, y))| *d += if *y > 0.0 { *gv } else { 0.0 });
            }
        }
        Op::Exp(x) => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut()
                    .zip(g.iter().zip(value.data()))
                    .for_each(|(d, (gv, y))| *d += gv * y);
            }
        }
        Op::Softmax(x) => {
            if head[x.0].needs_grad {
                let cols = value.cols();
                let dx = grad_buf(head, *x).expect("checked");
                for ((drow, grow), yrow) in
                    dx.chunks_mut(cols).zip(g.chunks(cols)).zip(value.data().chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if head[x.0].needs_grad {
                let n = head[x.0].value.len() as f64;
                let dx = grad_buf(head, *x).expect("checked");
                dx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::MseLoss(a, b) => {
            let av = head[a.0].value.data().to_vec();
            let bv = head[b.0].value.data().to_vec();
            let s = 2.0 * g[0] / av.len() as f64;
            if let Some(da) = grad_buf(head, *a) {
                da.iter_mut()
                    .zip(av.iter().zip(&bv))
                    .for_each(|(d, (x, y))| *d += s * (x - y));
            }
            if let Some(db) = grad_buf(head, *b) {
                db.iter_mut()
                    .zip(av.iter().zip(&bv))
                    .for_each(|(d, (x, y))| *d -= s * (x - y));
            }
        }
        Op::KlNormal(mu, logvar) => {
            let batch = head[mu.0].value.rows() as f64;
            let s = g[0] / batch;
            if head[mu.0].needs_grad {
                let mv = head[mu.0].value.data().to_vec();
                let dm = grad_buf(head, *mu).expect("checked");
                dm.iter_mut().zip(&mv).for_each(|(d, m)| *d += s * m);
            }
            if head[logvar.0].needs_grad {
                let lv = head[logvar.0].value.data().to_vec();
                let dl = grad_buf(head, *logvar).expect("checked");
                dl.iter_mut().zip(&lv).for_each(|(d, l)| *d += s * 0.5 * (l.exp() - 1.0));
            }
        }
        Op::LayerNorm { x, gain, bias, inv_std, mean } => {
            let cols = value.cols();
            let xv = head[x.0].value.data().to_vec();
            let gv = head[gain.0].value.data().to_vec();
            if head[gain.0].needs_grad {
                let dgain = grad_buf(head, *gain).expect("checked");
                for (r, grow) in g.chunks(cols).enumerate() {
                    for (c, gval) in grow.iter().enumerate() {
                        let xhat = (xv[r * cols + c] - mean[r]) * inv_std[r];
                        dgain[c] += gval * xhat;
                    }
                }
            }
            if head[bias.0].needs_grad {
                let dbias = grad_buf(head, *bias).expect("checked");
                for grow in g.chunks(cols) {
                    dbias.iter_mut().zip(grow).for_each(|(d, gval)| *d += gval);
                }
            }
            if head[x.0].needs_grad {
                let dx = grad_buf(head, *x).expect("checked");
                let n = cols as f64;
                for (r, (drow, grow)) in dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    let mut sum1 = 0.0;
                    let mut sum2 = 0.0;
                    for (c, gval) in grow.iter().enumerate() {
                        let dxhat = gval * gv[c];
                        let xhat = (xv[r * cols + c] - mean[r]) * inv_std[r];
                        sum1 += dxhat;
                        sum2 += dxhat * xhat;
                    }
                    for (c, (d, gval)) in drow.iter_mut().zip(grow).enumerate() {
                        let dxhat = gval * gv[c];
                        let xhat = (xv[r * cols + c] - mean[r]) * inv_std[r];
                        *d += inv_std[r] * (dxhat - (sum1 + xhat * sum2) / n);
                    }
                }
            }
        }
        Op::BatchNorm { x, gain, bias, train, inv_std, mean } => {
            let cols = value.cols();
            let rows = head[x.0].value.rows();
            let xv = head[x.0].value.data().to_vec();
            let gv = head[gain.0].value.data().to_vec();
            let xhat_at = |r: usize, c: usize| (xv[r * cols + c] - mean[c]) * inv_std[c];
            if head[gain.0].needs_grad {
                let dgain = grad_buf(head, *gain).expect("checked");
                for (r, grow) in g.chunks(cols).enumerate() {
                    for (c, gval) in grow.iter().enumerate() {
                        dgain[c] += gval * xhat_at(r, c);
                    }
                }
            }
            if head[bias.0].needs_grad {
                let dbias = grad_buf(head, *bias).expect("checked");
                for grow in g.chunks(cols) {
                    dbias.iter_mut().zip(grow).for_each(|(d, gval)| *d += gval);
                }
            }
            if head[x.0].needs_grad {
                let n = rows as f64;
                if *train {
                    // Per column: dx = inv/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                    let mut sum1 = vec![0.0; cols];
                    let mut sum2 = vec![0.0; cols];
                    for (r, grow) in g.chunks(cols).enumerate() {
                        for (c, gval) in grow.iter().enumerate() {
                            let dxhat = gval * gv[c];
                            sum1[c] += dxhat;
                            sum2[c] += dxhat * xhat_at(r, c);
                        }
                    }
                    let dx = grad_buf(head, *x).expect("checked");
                    for (r, (drow, grow)) in dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        for (c, (d, gval)) in drow.iter_mut().zip(grow).enumerate() {
                            let dxhat = gval * gv[c];
                            let xhat = (xv[r * cols + c] - mean[c]) * inv_std[c];
                            *d += inv_std[c] / n * (n * dxhat - sum1[c] - xhat * sum2[c]);
                        }
                    }
                } else {
                    let dx = grad_buf(head, *x).expect("checked");
                    for (drow, grow) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for (c, (d, gval)) in drow.iter_mut().zip(grow).enumerate() {
                            *d += gval * gv[c] * inv_std[c];
                        }
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = grad_buf(head, *x) {
                dx.iter_mut()
                    .zip(g.iter().zip(mask))
                    .for_each(|(d, (gv, m))| *d += gv * m);
            }
        }
        Op::SliceCols { x, start, len } => {
            if head[x.0].needs_grad {
                let cols = head[x.0].value.cols();
                let dx = grad_buf(head, *x).expect("checked");
                for (r, grow) in g.chunks(*len).enumerate() {
                    dx[r * cols + start..r * cols + start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
        }
        Op::SliceRows { x, offset } => {
            if let Some(dx) = grad_buf(head, *x) {
                let start = offset * value.cols();
                dx[start..start + g.len()].iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
        Op::ConcatCols(parts) => {
            let total = value.cols();
            let mut col = 0;
            for p in parts {
                let c = head[p.0].value.cols();
                if head[p.0].needs_grad {
                    let dp = grad_buf(head, *p).expect("checked");
                    for (r, drow) in dp.chunks_mut(c).enumerate() {
                        drow.iter_mut()
                            .zip(&g[r * total + col..r * total + col + c])
                            .for_each(|(d, gv)| *d += gv);
                    }
                }
                col += c;
            }
        }
        Op::StackRows(parts) => {
            let cols = value.cols();
            let mut row = 0;
            for p in parts {
                let r = head[p.0].value.rows();
                if head[p.0].needs_grad {
                    let dp = grad_buf(head, *p).expect("checked");
                    dp.iter_mut()
                        .zip(&g[row * cols..(row + r) * cols])
                        .for_each(|(d, gv)| *d += gv);
                }
                row += r;
            }
        }
        Op::SliceAddRows { big, offset, small } => {
            let cols = value.cols();
            let rows = value.rows();
            if let Some(dbig) = grad_buf(head, *big) {
                dbig[offset * cols..(offset + rows) * cols]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gv)| *d += gv);
            }
            if let Some(dsmall) = grad_buf(head, *small) {
                dsmall.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
        Op::MeanPoolRows { x, group } => {
            if head[x.0].needs_grad {
                let cols = value.cols();
                let scale = 1.0 / *group as f64;
                let dx = grad_buf(head, *x).expect("checked");
                for (r, drow) in dx.chunks_mut(cols).enumerate() {
                    let o = r / group;
                    drow.iter_mut()
                        .zip(&g[o * cols..(o + 1) * cols])
                        .for_each(|(d, gv)| *d += gv * scale);
                }
            }
        }
        Op::Attention { q, k, v, heads, seq, probs } => {
            let d = value.cols();
            let dh = d / heads;
            let batch = value.rows() / seq;
            let scale = 1.0 / (dh as f64).sqrt();
            let qv = head[q.0].value.data().to_vec();
            let kv = head[k.0].value.data().to_vec();
            let vv = head[v.0].value.data().to_vec();
            let needs_q = head[q.0].needs_grad;
            let needs_k = head[k.0].needs_grad;
            let needs_v = head[v.0].needs_grad;
            let mut dq = if needs_q { vec![0.0; qv.len()] } else { Vec::new() };
            let mut dk = if needs_k { vec![0.0; kv.len()] } else { Vec::new() };
            let mut dv = if needs_v { vec![0.0; vv.len()] } else { Vec::new() };
            let mut dp = vec![0.0; seq * seq];
            let mut ds = vec![0.0; seq * seq];
            for b in 0..batch {
                for h in 0..*heads {
                    let off = b * seq * d + h * dh;
                    let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    if needs_v {
                        dgemm(
                            Trans::Yes, Trans::No, *seq, dh, *seq,
                            1.0, p, *seq, &g[off..], d, 1.0, &mut dv[off..], d,
                        );
                    }
                    if needs_q || needs_k {
                        // dP = g · Vᵀ, then softmax backward to dS.
                        dgemm(
                            Trans::No, Trans::Yes, *seq, *seq, dh,
                            1.0, &g[off..], d, &vv[off..], d, 0.0, &mut dp, *seq,
                        );
                        for ((ds_row, dp_row), p_row) in
                            ds.chunks_mut(*seq).zip(dp.chunks(*seq)).zip(p.chunks(*seq))
                        {
                            let dot: f64 =
                                dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                            for ((dsv, dpv), pv) in
                                ds_row.iter_mut().zip(dp_row).zip(p_row)
                            {
                                *dsv = pv * (dpv - dot);
                            }
                        }
                        if needs_q {
                            dgemm(
                                Trans::No, Trans::No, *seq, dh, *seq,
                                scale, &ds, *seq, &kv[off..], d, 1.0, &mut dq[off..], d,
                            );
                        }
                        if needs_k {
                            dgemm(
                                Trans::Yes, Trans::No, *seq, dh, *seq,
                                scale, &ds, *seq, &qv[off..], d, 1.0, &mut dk[off..], d,
                            );
                        }
                    }
                }
            }
            if needs_q {
                let buf = grad_buf(head, *q).expect("checked");
                buf.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
            }
            if needs_k {
                let buf = grad_buf(head, *k).expect("checked");
                buf.iter_mut().zip(&dk).for_each(|(a, b)| *a += b);
            }
            if needs_v {
                let buf = grad_buf(head, *v).expect("checked");
                buf.iter_mut().zip(&dv).for_each(|(a, b)| *a += b);
            }
        }
        Op::LstmCell { pre, prev, gates, tanh_c } => {
            let hidden = value.cols() / 2;
            let batch = value.rows();
            let cp: Option<Vec<f64>> = prev.map(|p| head[p.0].value.data().to_vec());
            let needs_pre = head[pre.0].needs_grad;
            let mut dpre = if needs_pre { vec![0.0; batch * 4 * hidden] } else { Vec::new() };
            let mut dprev_c = vec![0.0; batch * hidden];
            for b in 0..batch {
                let grow = &gates[b * 4 * hidden..(b + 1) * 4 * hidden];
                for j in 0..hidden {
                    let (f, i, gc, o) =
                        (grow[j], grow[hidden + j], grow[2 * hidden + j], grow[3 * hidden + j]);
                    let tc = tanh_c[b * hidden + j];
                    let dh = g[b * 2 * hidden + j];
                    let dc_ext = g[b * 2 * hidden + hidden + j];
                    let dc = dc_ext + dh * o * (1.0 - tc * tc);
                    let c_prev = cp
                        .as_ref()
                        .map(|v| v[b * 2 * hidden + hidden + j])
                        .unwrap_or(0.0);
                    if needs_pre {
                        let p = &mut dpre[b * 4 * hidden..(b + 1) * 4 * hidden];
                        p[j] += dc * c_prev * f * (1.0 - f);
                        p[hidden + j] += dc * gc * i * (1.0 - i);
                        p[2 * hidden + j] += dc * i * (1.0 - gc * gc);
                        p[3 * hidden + j] += dh * tc * o * (1.0 - o);
                    }
                    dprev_c[b * hidden + j] = dc * f;
                }
            }
            if needs_pre {
                let buf = grad_buf(head, *pre).expect("checked");
                buf.iter_mut().zip(&dpre).for_each(|(a, b)| *a += b);
            }
            if let Some(p) = prev {
                if let Some(buf) = grad_buf(head, *p) {
                    for b in 0..batch {
                        for j in 0..hidden {
                            buf[b * 2 * hidden + hidden + j] += dprev_c[b * hidden + j];
                        }
                    }
                }
            }
        }
        Op::LstmScan { pre, w_h, batch, reverse, gates, c, tanh_c } => {
            let batch = *batch;
            let hidden = value.cols();
            let gw = 4 * hidden;
            let steps = value.rows() / batch;
            let hv = value.data();
            let whv = head[w_h.0].value.data().to_vec();
            let needs_pre = head[pre.0].needs_grad;
            let needs_wh = head[w_h.0].needs_grad;
            let mut dwh = if needs_wh { vec![0.0; hidden * gw] } else { Vec::new() };
            let mut dh_carry = vec![0.0; batch * hidden];
            let mut dc_carry = vec![0.0; batch * hidden];
            let mut dpre_t = vec![0.0; batch * gw];
            // Unrolls the recurrence in reverse scan order: each step folds
            // the carried gradients into its gate pre-activations, then pushes
            // new carries to the step before it.
            for s in (0..steps).rev() {
                let t = if *reverse { steps - 1 - s } else { s };
                let t_prev = (s > 0).then(|| if *reverse { t + 1 } else { t - 1 });
                for b in 0..batch {
                    let row = (t * batch + b) * hidden;
                    let grow = &gates[(t * batch + b) * gw..(t * batch + b + 1) * gw];
                    let dp = &mut dpre_t[b * gw..(b + 1) * gw];
                    for j in 0..hidden {
                        let (f, i, gc, o) =
                            (grow[j], grow[hidden + j], grow[2 * hidden + j], grow[3 * hidden + j]);
                        let tc = tanh_c[row + j];
                        let dh = g[row + j] + dh_carry[b * hidden + j];
                        let dc = dc_carry[b * hidden + j] + dh * o * (1.0 - tc * tc);
                        let c_prev = match t_prev {
                            Some(ti) => c[(ti * batch + b) * hidden + j],
                            None => 0.0,
                        };
                        dp[j] = dc * c_prev * f * (1.0 - f);
                        dp[hidden + j] = dc * gc * i * (1.0 - i);
                        dp[2 * hidden + j] = dc * i * (1.0 - gc * gc);
                        dp[3 * hidden + j] = dh * tc * o * (1.0 - o);
                        dc_carry[b * hidden + j] = dc * f;
                    }
                }
                if let Some(ti) = t_prev {
                    dgemm(
                        Trans::No, Trans::Yes, batch, hidden, gw,
                        1.0, &dpre_t, gw, &whv, gw, 0.0, &mut dh_carry, hidden,
                    );
                    if needs_wh {
                        dgemm(
                            Trans::Yes, Trans::No, hidden, gw, batch,
                            1.0, &hv[ti * batch * hidden..(ti + 1) * batch * hidden], hidden,
                            &dpre_t, gw, 1.0, &mut dwh, gw,
                        );
                    }
                }
                if needs_pre {
                    let buf = grad_buf(head, *pre).expect("checked");
                    buf[t * batch * gw..(t + 1) * batch * gw]
                        .iter_mut()
                        .zip(&dpre_t)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            if needs_wh {
                let buf = grad_buf(head, *w_h).expect("checked");
                buf.iter_mut().zip(&dwh).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf1(tape: &Tape, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(data).trainable())
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = leaf1(&tape, vec![3.0, -1.0, 2.5]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.take_grad(x).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(x*x) at x = [1, 2] has gradient [2, 4].
        let tape = Tape::new();
        let x = leaf1(&tape, vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.take_grad(x).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let ones = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let prod = tape.matmul(x, ones).unwrap();
        assert_eq!(tape.value(prod).data(), &[3.0, 7.0]);

        let bad = tape.matmul(ones, x);
        assert!(bad.is_err());
    }

    #[test]
    fn activation_origin_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, -3.0, 3.0]));
        assert_eq!(tape.value(tape.sigmoid(x)).data()[0], 0.5);
        assert_eq!(tape.value(tape.tanh(x)).data()[0], 0.0);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_hand_example() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![2, 2],
            vec![0.0, 0.0, 1.0f64.ln(), 3.0f64.ln()],
        ).unwrap());
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 0.5).abs() < 1e-15);
        assert!((v.data()[2] - 0.25).abs() < 1e-12);
        assert!((v.data()[3] - 0.75).abs() < 1e-12);
        for row in v.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let shifted = tape.constant(Tensor::new(vec![1, 3], vec![100.3, 98.8, 102.0]).unwrap());
        let a = tape.softmax(x).unwrap();
        let b = tape.softmax(shifted).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero_and_pm_one_survives() {
        let tape = Tape::new();
        let gain = tape.constant(Tensor::from_vec(vec![1.0, 1.0]).reshape(vec![2]).unwrap());
        let bias = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 5.0, 1.0, -1.0]).unwrap());
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.value(y);
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 0.0);
        // Row [1, -1]: population variance 1, so outputs are +-1 up to eps.
        assert!((v.data()[2] - 1.0).abs() < 1e-4);
        assert!((v.data()[3] + 1.0).abs() < 1e-4);
        let mean = (v.data()[2] + v.data()[3]) / 2.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn batch_norm_normalizes_and_updates_running_stats() {
        let tape = Tape::new();
        let gain = tape.constant(Tensor::from_vec(vec![1.0]));
        let bias = tape.constant(Tensor::from_vec(vec![0.0]));
        // Batch mean 5, population variance 4.
        let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 7.0]).unwrap());
        let mut state = BnState::new(1, 0.1);
        let y = tape.batch_norm(x, gain, bias, &mut state, Mode::Train).unwrap();
        let v = tape.value(y);
        let m = (v.data()[0] + v.data()[1]) / 2.0;
        let var = v.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 2.0;
        assert!(m.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert!((state.running_mean[0] - 0.5).abs() < 1e-12);
        drop(v);

        // Infer mode is a frozen deterministic map.
        let z1 = tape.batch_norm(x, gain, bias, &mut state, Mode::Infer).unwrap();
        let z2 = tape.batch_norm(x, gain, bias, &mut state, Mode::Infer).unwrap();
        assert_eq!(tape.value(z1).data(), tape.value(z2).data());

        let single = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        assert!(tape.batch_norm(single, gain, bias, &mut state, Mode::Train).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::new();
        let mut rng = RngStream::from_seed(1);
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let same = tape.dropout(x, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(same, x);
        let infer = tape.dropout(x, 0.9, &mut rng, Mode::Infer).unwrap();
        assert_eq!(infer, x);
        assert!(tape.dropout(x, 1.0, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = leaf1(&tape, vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constant_subgraphs_get_no_gradient() {
        let tape = Tape::new();
        let x = leaf1(&tape, vec![1.0, 2.0]);
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.take_grad(x).unwrap(), vec![3.0, 4.0]);
        assert!(tape.take_grad(c).is_none());
    }

    #[test]
    fn lstm_cell_zero_weights_match_hand_algebra() {
        // All pre-activations zero: gates are 0.5, candidate 0, so with
        // c_prev = 0 the cell emits h = 0, c = 0.
        let tape = Tape::new();
        let pre = tape.constant(Tensor::zeros(vec![1, 8]));
        let out = tape.lstm_cell(pre, None).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // With c_prev = c: c_t = 0.5*c, h_t = 0.5*tanh(0.5*c).
        let c = 0.8;
        let prev = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, c, c]).unwrap());
        let out = tape.lstm_cell(pre, Some(prev)).unwrap();
        let v = tape.value(out);
        for j in 0..2 {
            assert!((v.data()[2 + j] - 0.5 * c).abs() < 1e-15);
            assert!((v.data()[j] - 0.5 * (0.5 * c).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn slice_rows_copies_and_routes_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
                .unwrap()
                .trainable(),
        );
        let mid = tape.slice_rows(x, 1, 2).unwrap();
        assert_eq!(tape.value(mid).shape(), &[2, 2]);
        assert_eq!(tape.value(mid).data(), &[2.0, 3.0, 4.0, 5.0]);
        let loss = tape.sum(mid);
        tape.backward(loss).unwrap();
        assert_eq!(tape.take_grad(x).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(tape.slice_rows(x, 3, 2).is_err());
    }

    /// The fused scan must agree with the step-by-step cell composition it
    /// replaces, on values and on gradients of both operands, in both
    /// directions. The two routes share no recurrence code, so this pins the
    /// fused forward and its backward-through-time sweep independently.
    #[test]
    fn fused_scan_matches_stepwise_cells() {
        for &(steps, batch, hidden, reverse) in &[
            (1usize, 1usize, 1usize, false),
            (1, 3, 2, true),
            (4, 2, 3, false),
            (4, 2, 3, true),
            (6, 1, 5, false),
            (3, 4, 1, true),
        ] {
            let mut rng = RngStream::from_seed(1000 + steps as u64 * 16 + hidden as u64);
            let mut fill = |len: usize| {
                let mut v = vec![0.0; len];
                rng.fill_standard_normal(&mut v);
                v.iter_mut().for_each(|x| *x *= 0.6);
                v
            };
            let pre_data = fill(steps * batch * 4 * hidden);
            let wh_data = fill(hidden * 4 * hidden);
            let target_data = fill(steps * batch * hidden);

            let run = |fused: bool| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                let tape = Tape::new();
                let pre = tape.leaf(
                    Tensor::new(vec![steps * batch, 4 * hidden], pre_data.clone())
                        .unwrap()
                        .trainable(),
                );
                let w_h = tape.leaf(
                    Tensor::new(vec![hidden, 4 * hidden], wh_data.clone()).unwrap().trainable(),
                );
                let h_all = if fused {
                    tape.lstm_scan(pre, w_h, batch, reverse).unwrap()
                } else {
                    let mut state: Option<Var> = None;
                    let mut hs: Vec<Option<Var>> = vec![None; steps];
                    let order: Vec<usize> = if reverse {
                        (0..steps).rev().collect()
                    } else {
                        (0..steps).collect()
                    };
                    for t in order {
                        let pre_t = match state {
                            Some(s) => {
                                let h = tape.slice_cols(s, 0, hidden).unwrap();
                                let rec = tape.matmul(h, w_h).unwrap();
                                tape.slice_add_rows(pre, t * batch, rec).unwrap()
                            }
                            None => tape.slice_rows(pre, t * batch, batch).unwrap(),
                        };
                        let next = tape.lstm_cell(pre_t, state).unwrap();
                        hs[t] = Some(tape.slice_cols(next, 0, hidden).unwrap());
                        state = Some(next);
                    }
                    let hs: Vec<Var> = hs.into_iter().map(|h| h.unwrap()).collect();
                    tape.stack_rows(&hs).unwrap()
                };
                let target = tape.constant(
                    Tensor::new(vec![steps * batch, hidden], target_data.clone()).unwrap(),
                );
                let loss = tape.mse_loss(h_all, target).unwrap();
                tape.backward(loss).unwrap();
                let out = tape.value(h_all).data().to_vec();
                // A single-step composition never touches w_h, so its grad
                // is absent rather than explicitly zero.
                let wh_grad =
                    tape.take_grad(w_h).unwrap_or_else(|| vec![0.0; wh_data.len()]);
                (out, tape.take_grad(pre).unwrap(), wh_grad)
            };

            let (va, pa, wa) = run(true);
            let (vb, pb, wb) = run(false);
            let close = |a: &[f64], b: &[f64], what: &str| {
                for (x, y) in a.iter().zip(b) {
                    assert!(
                        (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())),
                        "{what} mismatch {x} vs {y} at ({steps},{batch},{hidden},{reverse})"
                    );
                }
            };
            close(&va, &vb, "values");
            close(&pa, &pb, "pre grad");
            close(&wa, &wb, "w_h grad");
        }
    }

    #[test]
    fn attention_uniform_when_scores_are_flat() {
        // Zero Q and K give uniform attention: each output row is the mean
        // of the V rows within its (batch, head) block.
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![3, 2]));
        let k = tape.constant(Tensor::zeros(vec![3, 2]));
        let v = tape.constant(Tensor::new(vec![3, 2], vec![2.0, 0.0, 4.0, 2.0, 6.0, 4.0]).unwrap());
        let (out, probs) = tape.attention_with_probs(q, k, v, 1, 3).unwrap();
        let o = tape.value(out);
        for r in 0..3 {
            assert!((o.data()[r * 2] - 4.0).abs() < 1e-12);
            assert!((o.data()[r * 2 + 1] - 2.0).abs() < 1e-12);
        }
        for row in probs.data().chunks(3) {
            for p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_attention_returns_v() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 2], vec![5.0, -3.0]).unwrap());
        let out = tape.attention(q, k, v, 1, 1).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, -3.0]);
    }
}
