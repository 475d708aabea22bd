//! Dense f64 tensors, a define-by-run tape for reverse-mode gradients, and the
//! optimizer/checkpoint plumbing used by the networks.

mod adam;
mod checkpoint;
pub(crate) mod kernels;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use params::ParamSet;
pub use tape::{BatchNormStats, Gradients, Padding, Tape, Var, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
///
/// `grad` is only ever populated on tensors with `requires_grad` set, and it
/// always has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Same tensor with gradient tracking turned on.
    pub fn param(mut self) -> Self {
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Rank(format!("expected a scalar, got shape {:?}", self.shape)))
        }
    }

    /// Rows of the trailing axis.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        let c = *self.shape.last().expect("tensor has at least one axis");
        self.data.chunks_exact(c)
    }
}

/// Numerically stable softmax over the trailing axis of a plain tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let c = *logits.shape().last().unwrap_or(&0);
    if c < 2 {
        return Err(Error::Shape(format!(
            "softmax needs at least 2 classes, got shape {:?}",
            logits.shape()
        )));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.rows() {
        softmax_row(row, &mut out)?;
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_row(row: &[f64], out: &mut Vec<f64>) -> Result<()> {
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit in {row:?}")));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut sum = 0.0;
    for &x in row {
        let e = (x - max).exp();
        sum += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= sum);
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
