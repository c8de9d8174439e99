//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values are plain row-major [`Tensor`]s. Differentiable computation happens
//! on a [`Tape`]: leaves are registered with [`Tape::leaf`] (or
//! [`Tape::constant`] when no gradient is wanted), every op appends a node, and
//! [`Tape::backward`] replays the nodes in reverse creation order.

mod conv;
mod gradcheck;
mod tape;

pub use conv::{dilate_positions, Conv2dSpec, PaddingMode};
pub use gradcheck::{grad_check, grad_check_all};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty reduction")]
    EmptyReduction { op: &'static str },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("conv2d: kernel {kh}x{kw} larger than padded input {ph}x{pw}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        ph: usize,
        pw: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major n-dimensional array of `f64`. An empty shape is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    /// Element at a multi-index. Panics when the index is out of bounds.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} ({ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { expected: 6, got: 5, .. })
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros([2]).item().is_err());
    }
}
