//! Numeric substrate: the [`Tensor`] value type, a reverse-mode autodiff
//! tape ([`tape`]), deterministic random streams ([`rng`]), the Adam
//! optimizer ([`optim`]), and a binary checkpoint container ([`checkpoint`]).

pub mod checkpoint;
pub mod gemm;
pub mod math;
pub mod optim;
pub mod rng;
pub mod tape;

pub use rng::RngStream;
pub use tape::{Mode, Tape, Var};

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` in row-major order.
///
/// Tensors are plain values: operations on the autodiff tape never mutate
/// their inputs. `requires_grad` marks a tensor as trainable when it is
/// registered as a tape leaf, and `grad` is populated (same length as
/// `data`) when gradients are pulled back out of the tape after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} values, got {}", shape, expect, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![value; len], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    /// Marks the tensor as a trainable leaf (builder style).
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::reshape",
                detail: format!("cannot view {} values as {:?}", self.data.len(), shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// True when the tensor holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }
}
