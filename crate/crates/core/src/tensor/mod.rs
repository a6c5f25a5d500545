//! Dense tensors with a closed set of differentiable layers.
//!
//! Everything the segmenters and the patch classifier need lives here:
//! convolution, nearest-neighbour upsampling, 2×2 max pooling, batch
//! normalisation, residual blocks, channel concatenation for skip paths,
//! dense heads and the usual activations. Each layer has a hand-written
//! backward pass; [`grad_check`](gradcheck::grad_check) compares them against
//! central finite differences.
//!
//! The element type is a parameter. `f32` is the working type, `f64` is used
//! to verify gradients.

mod adam;
mod chain;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod layer;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use chain::Chain;
pub use graph::{ModelGraph, Param};
pub use layer::{
    BatchNorm2d, Conv2d, Dense, Layer, LayerKind, LayerSpec, ResidualBlock, Upsample, BN_EPSILON, BN_MOMENTUM,
};

/// Errors raised by tensor construction, layer evaluation and optimisation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor data length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },
    #[error("invalid dims {0:?}: extents must be positive and order at most 4")]
    BadDims(Vec<usize>),
    #[error("layer {layer} ({kind}): expected input {expected}, got {got:?}")]
    ShapeMismatch { layer: usize, kind: LayerKind, expected: String, got: Vec<usize> },
    #[error("layer {layer} ({kind}) produced a non-finite value")]
    NonFinite { layer: usize, kind: LayerKind },
    #[error("graph input {got:?} does not match declared signature N×{expected:?}")]
    InputSignature { expected: Vec<usize>, got: Vec<usize> },
    #[error("backward called without a cached train-mode forward")]
    NoForwardCache,
    #[error("output gradient {got:?} does not match forward output {expected:?}")]
    GradShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("invalid layer configuration: {0}")]
    BadLayer(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Forward evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches intermediates for backward.
    Train,
    /// Running statistics, no caching.
    Eval,
}

/// Scalar type a tensor can hold.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` over strided matrices.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must lie
    /// inside the corresponding slice.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every element type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("element converts to f64")
    }
}

impl Element for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// N-dimensional array (order ≤ 4) with an optional gradient slot.
///
/// Image batches use N×C×H×W layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.len() > 4 || dims.contains(&0) {
        return Err(TensorError::BadDims(dims.to_vec()));
    }
    Ok(dims.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != data.len() {
            return Err(TensorError::LengthMismatch { dims: dims.to_vec(), len: data.len() });
        }
        Ok(Tensor { dims: dims.to_vec(), data, grad: None })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Tensor { dims: dims.to_vec(), data: vec![value; len], grad: None })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Tensor { dims: dims.to_vec(), data: (0..len).map(&mut f).collect(), grad: None })
    }

    /// Builds a tensor whose dims are already known to be valid.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data, grad: None }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient slot, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::LengthMismatch { dims: self.dims.clone(), len: grad.len() });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != self.data.len() {
            return Err(TensorError::LengthMismatch { dims: dims.to_vec(), len: self.data.len() });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Converts the element type, dropping the gradient slot.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            grad: None,
        }
    }

    /// (N, C, H, W) of a 4-D tensor.
    pub fn nchw(&self) -> Option<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }

    /// Item `i` of the leading (batch) axis as a new tensor with batch 1.
    pub fn batch_item(&self, i: usize) -> Tensor<T> {
        let per = self.data.len() / self.dims[0];
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Tensor::from_parts(dims, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| TensorError::BadDims(Vec::new()))?;
        let tail = &first.dims[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            if &t.dims[1..] != tail {
                return Err(TensorError::BadDims(t.dims.clone()));
            }
            batch += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = batch;
        Ok(Tensor::from_parts(dims, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(matches!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]), Err(TensorError::LengthMismatch { .. })));
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn grad_slot_matches_length() {
        let mut t = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 4);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
    }

    #[test]
    fn stack_and_split_batches() {
        let a = Tensor::<f32>::full(&[1, 2, 1, 1], 1.0).unwrap();
        let b = Tensor::<f32>::full(&[1, 2, 1, 1], 2.0).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 1, 1]);
        assert_eq!(s.batch_item(1), b);
        assert_eq!(s.batch_item(0), a);
    }
}
