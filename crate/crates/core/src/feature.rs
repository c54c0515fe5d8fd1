//! Feature sets: a rank-2 feature matrix plus a per-row validity mask.
//!
//! All variable-length inputs (objects in a scene, tokens in a question)
//! travel as a `FeatureSet` at rest and as a `FeatureVar` while recorded on
//! a tape. Padded rows are marked invalid in the mask and hold zeros; every
//! consumer either masks them out of softmax sums or zeroes them after
//! row-mixing ops, so valid outputs never depend on padding.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A feature matrix at rest with its row-validity mask.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    features: Tensor,
    mask: Vec<bool>,
}

impl FeatureSet {
    pub fn new(features: Tensor, mask: Vec<bool>) -> Result<FeatureSet> {
        if features.rank() != 2 || features.rows() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "feature_set",
                lhs: features.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        Ok(FeatureSet { features, mask })
    }

    /// Wrap a matrix whose rows are all valid.
    pub fn dense(features: Tensor) -> Result<FeatureSet> {
        let mask = vec![true; features.rows()];
        FeatureSet::new(features, mask)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    /// Append zero rows marked invalid until the set has `rows` rows.
    pub fn pad_to(&self, rows: usize) -> Result<FeatureSet> {
        if rows < self.rows() {
            return Err(Error::InvalidShape {
                op: "pad_to",
                shape: self.features.shape().to_vec(),
                reason: format!("cannot shrink {} rows to {rows}", self.rows()),
            });
        }
        let d = self.dim();
        let mut data = self.features.data().to_vec();
        data.resize(rows * d, 0.0);
        let mut mask = self.mask.clone();
        mask.resize(rows, false);
        FeatureSet::new(Tensor::from_vec(&[rows, d], data)?, mask)
    }

    /// Record the features as a tape leaf, zeroing any padded rows.
    pub fn leaf(&self, tape: &mut Tape) -> Result<FeatureVar> {
        let var = tape.leaf(self.features.clone());
        let var = if self.mask.iter().all(|&v| v) {
            var
        } else {
            tape.mask_rows(var, &self.mask)?
        };
        Ok(FeatureVar {
            var,
            mask: self.mask.clone(),
        })
    }
}

/// A feature set recorded on a tape.
#[derive(Debug, Clone)]
pub struct FeatureVar {
    pub var: Var,
    pub mask: Vec<bool>,
}

impl FeatureVar {
    pub fn new(var: Var, mask: Vec<bool>) -> FeatureVar {
        FeatureVar { var, mask }
    }

    /// Materialize the current value with the mask attached.
    pub fn snapshot(&self, tape: &Tape) -> Result<FeatureSet> {
        FeatureSet::new(tape.value(self.var).clone(), self.mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_length_must_match_rows() {
        let t = Tensor::zeros(&[3, 2]);
        assert!(FeatureSet::new(t.clone(), vec![true, true]).is_err());
        assert!(FeatureSet::new(t, vec![true, false, true]).is_ok());
    }

    #[test]
    fn pad_appends_invalid_zero_rows() {
        let f = FeatureSet::dense(Tensor::filled(&[2, 3], 1.0)).unwrap();
        let padded = f.pad_to(4).unwrap();
        assert_eq!(padded.rows(), 4);
        assert_eq!(padded.valid_rows(), 2);
        assert_eq!(padded.mask(), &[true, true, false, false]);
        assert_eq!(padded.features().row(3), &[0.0, 0.0, 0.0]);
        assert_eq!(padded.features().row(0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn leaf_zeroes_padded_rows() {
        let features = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let f = FeatureSet::new(features, vec![true, false]).unwrap();
        let mut tape = Tape::new();
        let fv = f.leaf(&mut tape).unwrap();
        assert_eq!(tape.value(fv.var).row(0), &[1.0, 2.0]);
        assert_eq!(tape.value(fv.var).row(1), &[0.0, 0.0]);
    }
}
