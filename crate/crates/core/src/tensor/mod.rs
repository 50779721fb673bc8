//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! [`Tensor`] is a plain immutable value (row-major data plus dims). Every
//! differentiable operation exists twice: as a pure kernel in [`ops`] and as
//! a recorded method on [`Tape`], which calls the kernel and keeps whatever
//! the reverse pass needs.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{CustomOp, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    /// A failure raised by code built on top of the tape.
    #[error("{0}")]
    External(String),
}

impl From<crate::error::Error> for TensorError {
    fn from(e: crate::error::Error) -> Self {
        match e {
            crate::error::Error::Tensor(t) => t,
            other => TensorError::External(other.to_string()),
        }
    }
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense tensor. A tensor with empty `dims` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(TensorError::invalid(
                "tensor",
                format!("dims {:?} need {} values, got {}", dims, numel, data.len()),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::invalid("tensor", "zero-sized axis"));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::invalid(
                "item",
                format!("tensor of dims {:?} is not a scalar", self.dims),
            ));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut offset = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
            offset = offset * d + i;
        }
        self.data[offset]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return Err(TensorError::shape("reshape", &self.dims, dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index of the largest entry; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Materializes numpy-style broadcasting of `self` to `dims`.
    pub fn broadcast_to(&self, dims: &[usize]) -> Result<Tensor> {
        let out = ops::broadcast_dims("broadcast_to", &self.dims, dims)?;
        if out != dims {
            return Err(TensorError::shape("broadcast_to", &self.dims, dims));
        }
        let strides = ops::broadcast_strides(dims, &self.dims);
        let mut data = Vec::with_capacity(dims.iter().product());
        ops::for_each_offset(dims, &strides, |off| data.push(self.data[off]));
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Repeats the tensor `reps[k]` times along each axis.
    pub fn tile(&self, reps: &[usize]) -> Result<Tensor> {
        if reps.len() != self.rank() {
            return Err(TensorError::shape("tile", &self.dims, reps));
        }
        let dims: Vec<usize> = self.dims.iter().zip(reps).map(|(d, r)| d * r).collect();
        let mut index = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(dims.iter().product());
        for _ in 0..dims.iter().product::<usize>() {
            let src: Vec<usize> = index.iter().zip(&self.dims).map(|(i, d)| i % d).collect();
            data.push(self.at(&src));
            for k in (0..dims.len()).rev() {
                index[k] += 1;
                if index[k] < dims[k] {
                    break;
                }
                index[k] = 0;
            }
        }
        Ok(Tensor { dims, data })
    }
}
