//! Dense `f64` tensors, validity masks and a tape for reverse-mode
//! differentiation.
//!
//! Batched activations use the layout `(N, C, L)`: `N` channel sequences,
//! `C` feature rows and `L` (padded) time steps, row-major. Vectors per
//! sequence use `(N, K)`.

mod adam;
mod conv;
pub mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{loss_binary_ce, loss_softmax_ce, BatchStats, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("average pooling over a sequence with no valid positions (row {row})")]
    EmptyPool { row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("usage error: {0}")]
    Usage(String),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T, TensorError> {
    Err(TensorError::Dimension(msg.into()))
}

/// Zero padding policy of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// `floor(k/2)` zeros on the left and `k - 1 - floor(k/2)` on the right.
    Same,
    /// `k - 1` zeros on the left only.
    Causal,
}

impl Padding {
    pub fn left(self, kernel: usize) -> usize {
        match self {
            Padding::Same => kernel / 2,
            Padding::Causal => kernel - 1,
        }
    }
}

/// A dense row-major array with an optional accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }
}

/// Per-row validity of a padded batch: row `n` has `lengths[n]` real
/// observations followed by zero padding up to `width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    lengths: Vec<usize>,
    width: usize,
}

impl Mask {
    pub fn from_lengths(lengths: Vec<usize>, width: usize) -> Result<Self, TensorError> {
        if let Some(&bad) = lengths.iter().find(|&&n| n > width) {
            return dim_err(format!("valid length {bad} exceeds mask width {width}"));
        }
        Ok(Self { lengths, width })
    }

    /// All positions valid.
    pub fn full(rows: usize, width: usize) -> Self {
        Self {
            lengths: vec![width; rows],
            width,
        }
    }

    /// Builds a mask from explicit 0/1 rows; each row must be a prefix of
    /// ones followed by zeros.
    pub fn from_bits(rows: &[Vec<u8>]) -> Result<Self, TensorError> {
        let width = rows.first().map_or(0, Vec::len);
        let mut lengths = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            if row.len() != width {
                return dim_err("mask rows differ in length");
            }
            let n = row.iter().take_while(|&&b| b == 1).count();
            if row[n..].iter().any(|&b| b != 0) {
                return Err(TensorError::Usage(format!(
                    "mask row {r} is not a prefix of ones followed by zeros"
                )));
            }
            lengths.push(n);
        }
        Ok(Self { lengths, width })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn valid(&self, row: usize) -> usize {
        self.lengths[row]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn is_valid(&self, row: usize, t: usize) -> bool {
        t < self.lengths[row]
    }
}
