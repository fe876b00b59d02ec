//! Dense row-major f64 tensors.
//!
//! Values are validated to be finite when a tensor is constructed from
//! outside data and when a public arithmetic op produces a result, so a
//! tensor that exists is safe to feed anywhere downstream.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    /// Build from shape and data; rejects shape/length mismatch and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Tensor::new".into(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor that skips the finiteness scan. Divergence is
    /// caught at the loss, where it can be reported with context, rather
    /// than mid-graph.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar_shaped(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar-shaped tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar_shaped() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }
}

/// Elementwise add/sub/mul. Operands must share a shape, or one of them
/// must be scalar-shaped (it is then broadcast against the other).
pub fn tensor_binary(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let apply = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let out = if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| apply(x, y))
            .collect();
        Tensor {
            shape: a.shape.clone(),
            data,
        }
    } else if b.is_scalar_shaped() {
        let s = b.data[0];
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| apply(x, s)).collect(),
        }
    } else if a.is_scalar_shaped() {
        let s = a.data[0];
        Tensor {
            shape: b.shape.clone(),
            data: b.data.iter().map(|&y| apply(s, y)).collect(),
        }
    } else {
        return Err(Error::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    };
    if !out.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("tensor_binary {op:?}"),
        });
    }
    Ok(out)
}
