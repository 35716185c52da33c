//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are plain row-major buffers; differentiation happens on a
//! define-by-run [`Graph`](graph::Graph) whose nodes record enough to replay
//! the chain rule in reverse. Precision is generic: training runs in `f32`,
//! gradient checks in `f64`.

mod graph;
mod ops;

pub use graph::{backward, grad_check, Graph, NodeId};

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Floating-point element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn of_f64(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).unwrap()
    }
    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major tensor. Rank 1 or 2 in practice; scalars are `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn scalar(x: T) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { shape: vec![r, c], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row/column extents, treating rank-1 tensors as a single row.
    pub fn rc(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rc() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.rc();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.rc();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let (_, cols) = self.rc();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64_()).collect(),
        }
    }

    pub fn of_f64(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| <T as Scalar>::of_f64(v)).collect(),
        }
    }
}

/// Indices and values of the `k` largest entries, ties broken by lowest index.
///
/// Deterministic: for equal values the earlier index wins, so routing is
/// reproducible across runs.
pub fn topk<T: Scalar>(x: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    if k == 0 || k > x.len() {
        return Err(Error::InvalidArgument(format!(
            "topk: k={} out of range for length {}",
            k,
            x.len()
        )));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // Stable sort by descending value keeps the lowest index first among ties.
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap());
    let sel: Vec<usize> = idx[..k].to_vec();
    let vals = sel.iter().map(|&i| x[i]).collect();
    Ok((sel, vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_basic() {
        let (idx, vals) = topk(&[0.1f64, 0.9, 0.5], 1).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(vals, vec![0.9]);
    }

    #[test]
    fn topk_tie_breaks_to_lowest_index() {
        let (idx, _) = topk(&[0.5f64, 0.5, 0.2], 1).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn topk_two_of_four() {
        let (mut idx, _) = topk(&[2.0f64, 1.0, 0.0, -1.0], 2).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn topk_k_out_of_range() {
        assert!(topk(&[1.0f64], 2).is_err());
        assert!(topk(&[1.0f64], 0).is_err());
    }

    #[test]
    fn tensor_shape_guard() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0]).is_err());
    }
}
