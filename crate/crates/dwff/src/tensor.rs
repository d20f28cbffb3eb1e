//! Dense row-major tensors over `f64`.
//!
//! `Tensor` is the sole numeric carrier of the crate: feature maps, label
//! one-hots, parameters, and gradients all live in it. Values are immutable
//! after construction; differentiable computation happens on a [`crate::tape::GradTape`]
//! that owns its own buffers.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("matmul inner dimension mismatch: left {left:?} vs right {right:?}")]
    InnerDimMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite value at flat index {index} of {context}")]
    NonFinite { context: String, index: usize },
    #[error("shape/data length mismatch: shape {shape:?} holds {expected} values, got {got}")]
    LengthMismatch { shape: Vec<usize>, expected: usize, got: usize },
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("group count {groups} does not divide channel count {channels}")]
    InvalidGroups { channels: usize, groups: usize },
}

/// Dense multi-dimensional array: immutable shape, flat row-major `f64` data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { expected, got: data.len(), shape });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place value access for the optimizer; the shape stays fixed.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Consumes the tensor, returning its flat storage.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Value at a multi-index. Panics on rank mismatch; debug-checked bounds.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Row-wise softmax of `scores / temp` with max-subtraction.
///
/// `scores` is treated as `rows` rows of `cols` entries. Every output row
/// sums to 1 within 1e-12 and preserves the argmax of its input row for any
/// positive temperature.
pub fn softmax_temperature(
    scores: &[f64],
    rows: usize,
    cols: usize,
    temp: f64,
) -> Result<Vec<f64>, TensorError> {
    if temp.is_nan() || temp <= 0.0 {
        return Err(TensorError::NonPositiveTemperature(temp));
    }
    if let Some(idx) = scores.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { context: "softmax scores".into(), index: idx });
    }
    debug_assert_eq!(scores.len(), rows * cols);
    let mut out = vec![0.0; scores.len()];
    for r in 0..rows {
        let row = &scores[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = ((row[c] - max) / temp).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    Ok(out)
}

/// Shannon entropy of a distribution row in nats, with the 0·ln 0 := 0 convention.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum()
}
