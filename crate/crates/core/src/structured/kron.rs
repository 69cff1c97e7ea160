//! Sums of Kronecker products `sum_i A_i (x) B_i` and their Frobenius-norm
//! projection through the rearrangement + truncated SVD.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{svd, Mat};

/// Shape of a rank-`rank` Kronecker sum with `A_i` of size `m1 x n1` and
/// `B_i` of size `m2 x n2`. The represented matrix is `(m1 m2) x (n1 n2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KronShape {
    pub rank: usize,
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
}

impl KronShape {
    pub fn rows(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn cols(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn max_rank(&self) -> usize {
        (self.m1 * self.n1).min(self.m2 * self.n2)
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.m1 * self.n1 + self.m2 * self.n2)
    }

    pub fn transposed(&self) -> Self {
        Self {
            rank: self.rank,
            m1: self.n1,
            n1: self.m1,
            m2: self.n2,
            n2: self.m2,
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if [self.m1, self.n1, self.m2, self.n2].contains(&0) {
            return Err(shape_err("Kronecker factor dimensions must be positive"));
        }
        if self.rows() != rows || self.cols() != cols {
            return Err(shape_err(format!(
                "Kronecker shape {}x{} (x) {}x{} does not tile a {}x{} matrix",
                self.m1, self.n1, self.m2, self.n2, rows, cols
            )));
        }
        if self.rank > self.max_rank() {
            return Err(Error::RankTooLarge {
                rank: self.rank,
                max: self.max_rank(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerSum {
    pub shape: KronShape,
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
}

impl KroneckerSum {
    pub fn new(a: Vec<Mat>, b: Vec<Mat>) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(shape_err("Kronecker sum needs matching, non-empty factor lists"));
        }
        let (m1, n1) = a[0].shape();
        let (m2, n2) = b[0].shape();
        if a.iter().any(|x| x.shape() != (m1, n1)) || b.iter().any(|x| x.shape() != (m2, n2)) {
            return Err(shape_err("Kronecker factors must share shapes"));
        }
        Ok(Self {
            shape: KronShape { rank: a.len(), m1, n1, m2, n2 },
            a,
            b,
        })
    }

    pub fn zeros(shape: KronShape) -> Self {
        Self {
            shape,
            a: vec![Mat::zeros(shape.m1, shape.n1); shape.rank],
            b: vec![Mat::zeros(shape.m2, shape.n2); shape.rank],
        }
    }

    pub fn rank(&self) -> usize {
        self.a.len()
    }

    pub fn materialize(&self) -> Mat {
        let s = &self.shape;
        let mut out = Mat::zeros(s.rows(), s.cols());
        for (a, b) in self.a.iter().zip(&self.b) {
            out += a.kronecker(b);
        }
        out
    }

    /// `X * materialize()` without forming the dense matrix: for each row
    /// `x` reshaped to `m1 x m2`, the output row is `sum_i A_i^T X_r B_i`
    /// flattened as `n1 x n2`.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        let s = &self.shape;
        if x.ncols() != s.rows() {
            return Err(shape_err(format!(
                "apply: input has {} columns, Kronecker sum has {} rows",
                x.ncols(),
                s.rows()
            )));
        }
        let mut out = Mat::zeros(x.nrows(), s.cols());
        let mut xr = Mat::zeros(s.m1, s.m2);
        for row in 0..x.nrows() {
            for a in 0..s.m1 {
                for i in 0..s.m2 {
                    xr[(a, i)] = x[(row, a * s.m2 + i)];
                }
            }
            let mut acc = Mat::zeros(s.n1, s.n2);
            for (af, bf) in self.a.iter().zip(&self.b) {
                acc += af.transpose() * &xr * bf;
            }
            for b in 0..s.n1 {
                for j in 0..s.n2 {
                    out[(row, b * s.n2 + j)] = acc[(b, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn transposed(&self) -> Self {
        Self {
            shape: self.shape.transposed(),
            a: self.a.iter().map(|m| m.transpose()).collect(),
            b: self.b.iter().map(|m| m.transpose()).collect(),
        }
    }
}

/// Rearranges `W ((m1 m2) x (n1 n2))` into `(m1 n1) x (m2 n2)` so that
/// `A (x) B` maps to `vec(A) vec(B)^T` (row-major vec):
/// `out[i1*n1 + j1, i2*n2 + j2] = W[i1*m2 + i2, j1*n2 + j2]`.
pub fn rearrange_kron(w: &Mat, m1: usize, n1: usize, m2: usize, n2: usize) -> Result<Mat> {
    if w.nrows() != m1 * m2 || w.ncols() != n1 * n2 {
        return Err(shape_err(format!(
            "rearrange: {}x{} is not ({}*{})x({}*{})",
            w.nrows(),
            w.ncols(),
            m1,
            m2,
            n1,
            n2
        )));
    }
    let mut out = Mat::zeros(m1 * n1, m2 * n2);
    for i1 in 0..m1 {
        for j1 in 0..n1 {
            for i2 in 0..m2 {
                for j2 in 0..n2 {
                    out[(i1 * n1 + j1, i2 * n2 + j2)] = w[(i1 * m2 + i2, j1 * n2 + j2)];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`rearrange_kron`].
pub fn unrearrange_kron(r: &Mat, m1: usize, n1: usize, m2: usize, n2: usize) -> Result<Mat> {
    if r.nrows() != m1 * n1 || r.ncols() != m2 * n2 {
        return Err(shape_err("unrearrange: dimension mismatch"));
    }
    let mut out = Mat::zeros(m1 * m2, n1 * n2);
    for i1 in 0..m1 {
        for j1 in 0..n1 {
            for i2 in 0..m2 {
                for j2 in 0..n2 {
                    out[(i1 * m2 + i2, j1 * n2 + j2)] = r[(i1 * n1 + j1, i2 * n2 + j2)];
                }
            }
        }
    }
    Ok(out)
}

/// Best Frobenius-norm approximation of `w` by a rank-`shape.rank`
/// Kronecker sum: truncated SVD of the rearranged matrix, with the square
/// root of each singular value split between the two factors.
pub fn kron_project(w: &Mat, shape: KronShape) -> Result<KroneckerSum> {
    shape.validate(w.nrows(), w.ncols())?;
    let KronShape { rank, m1, n1, m2, n2 } = shape;
    let r = rearrange_kron(w, m1, n1, m2, n2)?;
    let d = svd(&r);
    let mut a = Vec::with_capacity(rank);
    let mut b = Vec::with_capacity(rank);
    for k in 0..rank {
        let root = d.s[k].sqrt();
        let ucol = d.u.column(k);
        let vrow = d.vt.row(k);
        a.push(Mat::from_fn(m1, n1, |i, j| ucol[i * n1 + j] * root));
        b.push(Mat::from_fn(m2, n2, |i, j| vrow[i * n2 + j] * root));
    }
    Ok(KroneckerSum { shape, a, b })
}
