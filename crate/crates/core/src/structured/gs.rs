//! GS-matrices `P_L (L P R) P_R` with block-diagonal `L` (`kl` blocks of
//! `bl1 x bl2`) and `R` (`kr` blocks of `br1 x br2`).

use serde::{Deserialize, Serialize};

use super::perm::Perm;
use crate::error::{shape_err, Result};
use crate::linalg::{svd, Mat};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsPerms {
    pub left: Perm,
    pub mid: Perm,
    pub right: Perm,
}

/// Block layout of a GS-matrix. When `perms` is absent the Monarch-style
/// default is used: identity `P_L`, `P_R` and a perfect shuffle for `P`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsShape {
    pub kl: usize,
    pub kr: usize,
    pub bl1: usize,
    pub bl2: usize,
    pub br1: usize,
    pub br2: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perms: Option<GsPerms>,
}

impl GsShape {
    pub fn new(kl: usize, kr: usize, bl1: usize, bl2: usize, br1: usize, br2: usize) -> Self {
        Self { kl, kr, bl1, bl2, br1, br2, perms: None }
    }

    pub fn rows(&self) -> usize {
        self.kl * self.bl1
    }

    pub fn cols(&self) -> usize {
        self.kr * self.br2
    }

    pub fn inner(&self) -> usize {
        self.kl * self.bl2
    }

    pub fn param_count(&self) -> usize {
        self.kl * self.bl1 * self.bl2 + self.kr * self.br1 * self.br2
    }

    /// Kept-parameter fraction `(kl bl1 bl2 + kr br1 br2) / (kl kr bl1 br2)`.
    pub fn param_fraction(&self) -> f64 {
        self.param_count() as f64 / (self.rows() * self.cols()) as f64
    }

    pub fn resolved_perms(&self) -> GsPerms {
        self.perms.clone().unwrap_or_else(|| GsPerms {
            left: Perm::identity(self.rows()),
            mid: Perm::stride(self.kr, self.br1),
            right: Perm::identity(self.cols()),
        })
    }

    /// Shape of the transpose: `(P_L L P R P_R)^T = P_R^T R^T P^T L^T P_L^T`.
    pub fn transposed(&self) -> Self {
        let p = self.resolved_perms();
        let mut t = Self::new(self.kr, self.kl, self.br2, self.br1, self.bl2, self.bl1);
        let perms = GsPerms { left: p.right.inverse(), mid: p.mid.inverse(), right: p.left.inverse() };
        if perms != t.resolved_perms() {
            t.perms = Some(perms);
        }
        t
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if [self.kl, self.kr, self.bl1, self.bl2, self.br1, self.br2].contains(&0) {
            return Err(shape_err("GS block sizes must be positive"));
        }
        if self.kl * self.bl2 != self.kr * self.br1 {
            return Err(shape_err(format!(
                "GS inner dimensions differ: kl*bl2 = {} vs kr*br1 = {}",
                self.kl * self.bl2,
                self.kr * self.br1
            )));
        }
        if self.rows() != rows || self.cols() != cols {
            return Err(shape_err(format!(
                "GS shape {}x{} does not match a {}x{} matrix",
                self.rows(),
                self.cols(),
                rows,
                cols
            )));
        }
        if let Some(p) = &self.perms {
            p.left.check_len(self.rows(), "P_L")?;
            p.mid.check_len(self.inner(), "P")?;
            p.right.check_len(self.cols(), "P_R")?;
        }
        Ok(())
    }

    /// Inner indices `t` coupling L block `i` with R block `j`; the
    /// `(i, j)` block of `L P R` has rank at most the length of that list.
    pub fn block_couplings(&self) -> Vec<Vec<Vec<usize>>> {
        let mid = self.resolved_perms().mid;
        let mut out = vec![vec![Vec::new(); self.kr]; self.kl];
        for (t, &pt) in mid.as_slice().iter().enumerate() {
            out[t / self.bl2][pt / self.br1].push(t);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsMatrix {
    pub shape: GsShape,
    pub l: Vec<Mat>,
    pub r: Vec<Mat>,
}

impl GsMatrix {
    pub fn zeros(shape: GsShape) -> Self {
        Self {
            l: vec![Mat::zeros(shape.bl1, shape.bl2); shape.kl],
            r: vec![Mat::zeros(shape.br1, shape.br2); shape.kr],
            shape,
        }
    }

    pub fn new(shape: GsShape, l: Vec<Mat>, r: Vec<Mat>) -> Result<Self> {
        shape.validate(shape.rows(), shape.cols())?;
        if l.len() != shape.kl || l.iter().any(|b| b.shape() != (shape.bl1, shape.bl2)) {
            return Err(shape_err("L blocks do not match the GS shape"));
        }
        if r.len() != shape.kr || r.iter().any(|b| b.shape() != (shape.br1, shape.br2)) {
            return Err(shape_err("R blocks do not match the GS shape"));
        }
        Ok(Self { shape, l, r })
    }

    pub fn l_dense(&self) -> Mat {
        block_diag(&self.l)
    }

    pub fn r_dense(&self) -> Mat {
        block_diag(&self.r)
    }

    /// `L P R` (permutations `P_L`, `P_R` not applied).
    pub fn core(&self) -> Mat {
        let p = self.shape.resolved_perms();
        self.l_dense() * p.mid.left_mul(&self.r_dense())
    }

    pub fn materialize(&self) -> Mat {
        let p = self.shape.resolved_perms();
        p.right.right_mul(&p.left.left_mul(&self.core()))
    }

    /// `X * materialize()` as permute, block-multiply, permute,
    /// block-multiply, permute.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        let s = &self.shape;
        if x.ncols() != s.rows() {
            return Err(shape_err(format!(
                "apply: input has {} columns, GS matrix has {} rows",
                x.ncols(),
                s.rows()
            )));
        }
        let p = s.resolved_perms();
        let xp = p.left.right_mul(x);
        let mut y = Mat::zeros(x.nrows(), s.inner());
        for (i, li) in self.l.iter().enumerate() {
            let blk = xp.columns(i * s.bl1, s.bl1) * li;
            y.columns_mut(i * s.bl2, s.bl2).copy_from(&blk);
        }
        let yp = p.mid.right_mul(&y);
        let mut z = Mat::zeros(x.nrows(), s.cols());
        for (j, rj) in self.r.iter().enumerate() {
            let blk = yp.columns(j * s.br1, s.br1) * rj;
            z.columns_mut(j * s.br2, s.br2).copy_from(&blk);
        }
        Ok(p.right.right_mul(&z))
    }

    pub fn transposed(&self) -> Self {
        Self {
            shape: self.shape.transposed(),
            l: self.r.iter().map(|b| b.transpose()).collect(),
            r: self.l.iter().map(|b| b.transpose()).collect(),
        }
    }
}

pub(crate) fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Exact Frobenius projection for fixed permutations. After undoing
/// `P_L`, `P_R`, block `(i, j)` of the target receives its best
/// approximation of rank equal to the number of inner indices coupling L
/// block `i` with R block `j`; those inner columns/rows of `L`/`R` carry the
/// scaled singular vectors.
pub fn gs_project(w: &Mat, shape: &GsShape) -> Result<GsMatrix> {
    shape.validate(w.nrows(), w.ncols())?;
    let p = shape.resolved_perms();
    let target = p.right.right_mul_t(&p.left.left_mul_t(w));
    let mut out = GsMatrix::zeros(shape.clone());
    let couplings = shape.block_couplings();
    for (i, row) in couplings.iter().enumerate() {
        for (j, ts) in row.iter().enumerate() {
            if ts.is_empty() {
                continue;
            }
            let blk = target
                .view((i * shape.bl1, j * shape.br2), (shape.bl1, shape.br2))
                .into_owned();
            let d = svd(&blk);
            for (k, &t) in ts.iter().enumerate() {
                if k >= d.s.len() {
                    break;
                }
                let root = d.s[k].sqrt();
                let lc = t % shape.bl2;
                let rr = p.mid.as_slice()[t] % shape.br1;
                out.l[i].column_mut(lc).copy_from(&(d.u.column(k) * root));
                out.r[j].row_mut(rr).copy_from(&(d.vt.row(k) * root));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_normal, singular_values, tail_energy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transpose_and_projection_keep_the_shape() {
        for shape in [GsShape::new(2, 2, 4, 2, 2, 4), GsShape::new(2, 1, 4, 3, 6, 8), GsShape::new(1, 4, 8, 8, 2, 3)] {
            assert_eq!(shape.transposed().transposed(), shape);
            let w = random_normal(shape.rows(), shape.cols(), &mut ChaCha8Rng::seed_from_u64(1));
            assert_eq!(gs_project(&w, &shape).unwrap().shape, shape);
        }
    }

    fn random_gs(shape: GsShape, seed: u64) -> GsMatrix {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let l = (0..shape.kl).map(|_| random_normal(shape.bl1, shape.bl2, &mut g)).collect();
        let r = (0..shape.kr).map(|_| random_normal(shape.br1, shape.br2, &mut g)).collect();
        GsMatrix::new(shape, l, r).unwrap()
    }

    #[test]
    fn identity_factors_materialize_to_identity() {
        let shape = GsShape {
            perms: Some(GsPerms {
                left: Perm::identity(4),
                mid: Perm::identity(4),
                right: Perm::identity(4),
            }),
            ..GsShape::new(2, 2, 2, 2, 2, 2)
        };
        let g = GsMatrix::new(shape, vec![Mat::identity(2, 2); 2], vec![Mat::identity(2, 2); 2]).unwrap();
        assert_eq!(g.materialize(), Mat::identity(4, 4));
    }

    #[test]
    fn own_class_is_fixed() {
        let shape = GsShape::new(2, 2, 4, 2, 2, 4);
        let g = random_gs(shape.clone(), 1);
        let w = g.materialize();
        let p = gs_project(&w, &shape).unwrap();
        assert!((p.materialize() - &w).norm() < 1e-10 * w.norm());
    }

    #[test]
    fn single_block_is_truncated_svd() {
        let w = random_normal(5, 6, &mut ChaCha8Rng::seed_from_u64(2));
        let shape = GsShape::new(1, 1, 5, 2, 2, 6);
        let p = gs_project(&w, &shape).unwrap();
        let resid = (&w - p.materialize()).norm_squared();
        assert!((resid - tail_energy(&singular_values(&w), 2)).abs() < 1e-10);
    }

    #[test]
    fn monarch_residual_matches_block_svd_oracle() {
        // 8x8, kl = kr = 2, stride permutation: every (i, j) block is 4x4
        // and receives rank bl2 / kr = 2.
        let w = random_normal(8, 8, &mut ChaCha8Rng::seed_from_u64(3));
        let shape = GsShape::new(2, 2, 4, 4, 4, 4);
        let p = gs_project(&w, &shape).unwrap();
        let resid = (&w - p.materialize()).norm_squared();
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let blk = w.view((4 * i, 4 * j), (4, 4)).into_owned();
                oracle += tail_energy(&singular_values(&blk), 2);
            }
        }
        assert!((resid - oracle).abs() < 1e-10);
    }

    #[test]
    fn apply_matches_materialized_product() {
        let mut shape = GsShape::new(2, 3, 3, 3, 2, 2);
        let mut g = ChaCha8Rng::seed_from_u64(4);
        shape.perms = Some(GsPerms {
            left: Perm::new(vec![5, 0, 3, 1, 4, 2]).unwrap(),
            mid: Perm::stride(3, 2),
            right: Perm::new(vec![1, 0, 5, 4, 2, 3]).unwrap(),
        });
        let gs = random_gs(shape, 5);
        let x = random_normal(4, 6, &mut g);
        let dense = &x * gs.materialize();
        assert!((gs.apply(&x).unwrap() - &dense).norm() <= 1e-12 * dense.norm());
    }

    #[test]
    fn transpose_round_trip() {
        let mut shape = GsShape::new(2, 4, 3, 4, 2, 2);
        shape.perms = Some(GsPerms {
            left: Perm::new(vec![5, 0, 3, 1, 4, 2]).unwrap(),
            mid: Perm::stride(4, 2),
            right: Perm::stride(2, 4),
        });
        let gs = random_gs(shape, 6);
        let t = gs.transposed();
        assert!((t.materialize() - gs.materialize().transpose()).norm() < 1e-13);
        assert_eq!(t.shape.param_count(), gs.shape.param_count());
    }

    #[test]
    fn inner_dimension_mismatch_rejected() {
        let shape = GsShape::new(2, 2, 4, 3, 2, 4);
        assert!(shape.validate(8, 8).is_err());
    }
}
