//! Reverse-mode automatic differentiation on dense row-major tensors.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into every recorded
//! node that requires them. The engine is deliberately small: exactly the
//! operations the encoder, decoder, and transformers need, each with a
//! hand-written adjoint that is verified against central finite differences
//! (see [`gradcheck`]).
//!
//! Two element types are supported: `f32` for training speed and `f64` for
//! gradient checking, selected by the type parameter on [`Graph`] and
//! [`Tensor`]. Finite-difference checks are unreliable in 32-bit, so the
//! checker always instantiates `f64`.
//!
//! Determinism contract: one graph is single-threaded; kernels may fan out
//! over independent output elements (rayon) but never race on shared
//! accumulators, and all reductions run in a fixed sequential order, so
//! results are bit-identical for identical inputs within one build.

mod adam;
mod graph;
pub mod gradcheck;
mod kernels;

pub use adam::{Adam, AdamConfig, ParamBinder, ParamStore};
pub use graph::{Graph, TensorRef};

/// Tag for the two supported element types, as stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Numeric element of a [`Tensor`]: `f32` or `f64`.
pub trait Element:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Dense n-dimensional array in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> E {
        assert!(self.data.len() == 1, "not a scalar tensor");
        self.data[0]
    }

    /// All elements finite; used for the hard NaN/Inf errors.
    pub fn all_finite(&self) -> bool {
        // One vectorizable pass: a sum of absolute values is finite iff
        // every term is finite and no overflow occurred; overflow only
        // happens when values are already astronomically large.
        let s = self
            .data
            .iter()
            .fold(E::zero(), |acc, &v| acc + v.abs());
        s.is_finite()
    }

    pub fn map<F: Element>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_invariant() {
        let t = Tensor::<f32>::zeros(vec![2, 3, 4]);
        assert_eq!(t.numel(), 24);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    #[should_panic]
    fn tensor_rejects_bad_length() {
        let _ = Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]);
    }

    #[test]
    fn finite_detection() {
        let mut t = Tensor::<f64>::zeros(vec![4]);
        assert!(t.all_finite());
        t.data_mut()[2] = f64::NAN;
        assert!(!t.all_finite());
        t.data_mut()[2] = f64::INFINITY;
        assert!(!t.all_finite());
    }
}
