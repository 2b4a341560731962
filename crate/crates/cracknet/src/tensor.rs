//! Plain n-dimensional array value.
//!
//! Row-major, channels-last layout (feature maps are `H x W x C`). `Tensor` is
//! the storage type for parameters, datasets and results; differentiable
//! computation happens on a [`crate::tape::Tape`], whose nodes carry tensors
//! plus their gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extent of the given axis.
    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Reinterprets the same data under a new shape.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type, used to move f32 datasets into f64 test graphs.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64c())).collect(),
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Flat index of a multidimensional coordinate.
pub fn flat_index(coords: &[usize], shape: &[usize]) -> usize {
    debug_assert_eq!(coords.len(), shape.len());
    let mut idx = 0;
    for (c, e) in coords.iter().zip(shape.iter()) {
        debug_assert!(c < e);
        idx = idx * e + c;
    }
    idx
}

/// Inverse of [`flat_index`].
pub fn unflatten(mut idx: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = idx % shape[d];
        idx /= shape[d];
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn flat_index_roundtrip() {
        let shape = [3usize, 4, 5];
        for idx in 0..60 {
            let coords = unflatten(idx, &shape);
            assert_eq!(flat_index(&coords, &shape), idx);
        }
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.clone().reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.values(), t.values());
        assert!(t.clone().reshaped(vec![4, 2]).is_err());
    }
}
