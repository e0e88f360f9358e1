//! Dense row-major tensors and a reverse-mode tape over them.
//!
//! Parameters live in [`Tensor`]s owned by the caller. A forward pass records
//! operations on a [`Graph`]; each parameter enters the graph once as a leaf
//! no matter how many times it is used, so the leaf gradient returned by
//! [`Graph::backward`] is the sum of every use site's contribution.

mod check;
mod graph;
mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, NumAssign};
use thiserror::Error;

pub use check::{
    central_differences, finite_diff_check, finite_diff_report, relative_error, tensor_relative_error, FdReport,
};
pub use graph::{DropoutMode, Gradients, Graph, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target {target} at position {position} is outside vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("function is not deterministic: two evaluations at the same point gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("malformed tensor dump: {0}")]
    Parse(String),
}

/// Floating point element type. `f32` is used for training, `f64` for
/// gradient verification.
pub trait Scalar:
    Float + NumAssign + Default + Debug + Display + FromStr + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn cast_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_count(n: usize) -> Self {
        Self::cast_f64(n as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn cast_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn cast_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("positive dimensions")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(&[1], vec![value]).unwrap()
    }

    /// Marks the tensor trainable and gives it a zeroed gradient buffer.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<(), TensorError> {
        if delta.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::cast_f64(v.as_f64())).collect()),
        }
    }

    /// Text dump: a `shape:` header line followed by one line of values in
    /// shortest round-trip form.
    pub fn dump(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let values: Vec<String> = self.data.iter().map(|v| v.to_string()).collect();
        format!("shape: {}\n{}\n", shape.join(" "), values.join(" "))
    }

    pub fn parse_dump(text: &str) -> Result<Self, TensorError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("shape:"))
            .ok_or_else(|| TensorError::Parse("missing `shape:` header".into()))?;
        let shape = header
            .split_whitespace()
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TensorError::Parse(format!("bad dimension: {e}")))?;
        let data = lines
            .flat_map(|l| l.split_whitespace())
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| TensorError::Parse(format!("bad value `{v}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Tensor::new(&shape, data)
    }
}
