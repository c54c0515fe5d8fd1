//! Dense rank-1..3 tensors, double precision, row-major.
//!
//! A [`Tensor`] is an immutable value: once constructed its data never
//! changes, and clones share storage. This makes it safe to hand the same
//! tensor to many concurrent forward passes, and makes registering model
//! parameters on a gradient tape a constant-time operation.

use std::sync::Arc;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from raw row-major data. The shape must have rank 1..3
    /// and its product must equal `data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: format!("rank must be 1..={MAX_RANK}"),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "zero-sized dimension".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: format!("shape wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("valid zero tensor shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("valid filled tensor shape")
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("scalar shape")
    }

    /// Rank-2 tensor from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: vec![0],
                reason: "no rows".into(),
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![rows.len(), r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), cols], data)
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

    /// Row count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count for rank-2 tensors.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Single value of a scalar (1-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact equality of shape and bits.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[], vec![]).is_err());
        assert!(Tensor::from_vec(&[1, 2, 3, 4], vec![0.0; 24]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn clones_share_storage() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = t.clone();
        assert!(std::ptr::eq(t.data(), u.data()));
        assert!(t.bit_eq(&u));
    }

    #[test]
    fn row_access() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert_eq!(t.at2(0, 1), 2.0);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 2);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
