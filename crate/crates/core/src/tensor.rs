//! Dense row-major tensors.
//!
//! Ranks 1, 2 and 4 cover everything the pipeline touches: vectors,
//! matrices and NCHW feature maps. Scalars are rank-1 tensors of length 1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if !matches!(shape.len(), 1 | 2 | 4) {
        return Err(Error::invalid(
            "tensor shape",
            format!("rank {} unsupported (expected 1, 2 or 4): {:?}", shape.len(), shape),
        ));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(
            "tensor shape",
            format!("zero-sized dimension in {:?}", shape),
        ));
    }
    Ok(())
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor data",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        debug_assert!(validate_shape(shape).is_ok());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        debug_assert!(validate_shape(shape).is_ok());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        debug_assert!(validate_shape(shape).is_ok());
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        r * self.shape[1] + c
    }

    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> F {
        self.data[self.idx2(r, c)]
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> F {
        self.data[self.idx4(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise in-place addition; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Sum of squares of all entries, accumulated in index order.
    pub fn sum_squares(&self) -> F {
        let mut acc = F::zero();
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 3, 4], vec![0.0; 24]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn indexing_round_trip() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        assert_eq!(t.at4(1, 2, 1, 1), (t.len() - 1) as f64);
        let m = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(m.at2(1, 2), 5.0);
    }

    #[test]
    fn sum_squares_order_is_fixed() {
        let t = Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(t.sum_squares(), 25.0);
    }
}
