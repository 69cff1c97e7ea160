//! Permutations stored as index arrays.
//!
//! A permutation `p` of length `n` stands for the matrix `P` with
//! `P[i, p[i]] = 1`, so `(P M)[i, :] = M[p[i], :]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Perm(Vec<usize>);

impl Perm {
    pub fn new(idx: Vec<usize>) -> Result<Self> {
        let n = idx.len();
        let mut seen = vec![false; n];
        for &i in &idx {
            if i >= n || seen[i] {
                return Err(shape_err(format!("{:?} is not a permutation", idx)));
            }
            seen[i] = true;
        }
        Ok(Self(idx))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Perfect-shuffle permutation of `groups * group_len` indices:
    /// `t -> (t mod groups) * group_len + t / groups`.
    pub fn stride(groups: usize, group_len: usize) -> Self {
        let n = groups * group_len;
        Self((0..n).map(|t| (t % groups) * group_len + t / groups).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    pub fn to_matrix(&self) -> Mat {
        let n = self.0.len();
        let mut m = Mat::zeros(n, n);
        for (i, &p) in self.0.iter().enumerate() {
            m[(i, p)] = 1.0;
        }
        m
    }

    /// `P M`
    pub fn left_mul(&self, m: &Mat) -> Mat {
        debug_assert_eq!(m.nrows(), self.len());
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for (i, &p) in self.0.iter().enumerate() {
            out.row_mut(i).copy_from(&m.row(p));
        }
        out
    }

    /// `P^T M`
    pub fn left_mul_t(&self, m: &Mat) -> Mat {
        debug_assert_eq!(m.nrows(), self.len());
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for (i, &p) in self.0.iter().enumerate() {
            out.row_mut(p).copy_from(&m.row(i));
        }
        out
    }

    /// `M P`
    pub fn right_mul(&self, m: &Mat) -> Mat {
        debug_assert_eq!(m.ncols(), self.len());
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for (i, &p) in self.0.iter().enumerate() {
            out.column_mut(p).copy_from(&m.column(i));
        }
        out
    }

    /// `M P^T`
    pub fn right_mul_t(&self, m: &Mat) -> Mat {
        debug_assert_eq!(m.ncols(), self.len());
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for (j, &p) in self.0.iter().enumerate() {
            out.column_mut(j).copy_from(&m.column(p));
        }
        out
    }

    pub(crate) fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if self.len() != n {
            return Err(shape_err(format!("{} permutation has length {}, expected {}", what, self.len(), n)));
        }
        Ok(())
    }
}
