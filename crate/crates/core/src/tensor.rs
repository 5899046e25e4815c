//! Dense row-major tensor.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Row-major tensor with an explicit shape. Activations use `[c, h, w]`,
/// flat feature vectors `[d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![F::zero(); len] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            dims,
            data.len()
        );
        Tensor { dims: dims.to_vec(), data }
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Channel-row-column accessor for `[c, h, w]` tensors.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> F {
        debug_assert_eq!(self.dims.len(), 3);
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: F) {
        debug_assert_eq!(self.dims.len(), 3);
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Contiguous `h*w` slice of one channel of a `[c, h, w]` tensor.
    pub fn channel(&self, c: usize) -> &[F] {
        debug_assert_eq!(self.dims.len(), 3);
        let plane = self.dims[1] * self.dims[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        debug_assert_eq!(self.dims.len(), 3);
        let plane = self.dims[1] * self.dims[2];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
