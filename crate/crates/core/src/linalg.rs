//! Dense helpers shared by the solvers: a sorted, sign-normalized SVD,
//! SVD-based pseudo-inverses, symmetric roots and random test matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used by every pseudo-inverse in the crate.
pub const PINV_RCOND: f64 = 1e-10;

/// Thin SVD `M = U diag(s) V^T` with singular values in descending order.
///
/// Each singular pair is sign-normalized so that the largest-magnitude entry
/// of the left vector is positive. Ties between equal singular values keep
/// the order produced by the decomposition, so factors are only determined
/// up to that ambiguity; products and residuals are not.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

fn to_faer(m: &Mat) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

pub fn svd(m: &Mat) -> Svd {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Svd {
            u: Mat::zeros(rows, 0),
            s: Vec::new(),
            vt: Mat::zeros(0, cols),
        };
    }
    let dec = to_faer(m).thin_svd().expect("SVD did not converge");
    let (u0, v0) = (dec.U(), dec.V());
    let sv = dec.S().column_vector();
    let raw: Vec<f64> = (0..k).map(|j| sv[j]).collect();
    let order = descending(&raw);
    let s: Vec<f64> = order.iter().map(|&j| raw[j]).collect();
    let mut u = Mat::from_fn(rows, k, |i, j| u0[(i, order[j])]);
    let mut vt = Mat::from_fn(k, cols, |i, j| v0[(j, order[i])]);
    for j in 0..k {
        let col = u.column(j);
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &x in col.iter() {
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            u.column_mut(j).neg_mut();
            vt.row_mut(j).neg_mut();
        }
    }
    Svd { u, s, vt }
}

/// Singular values only, descending.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s = to_faer(m).singular_values().expect("SVD did not converge");
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Eigen-decomposition of a symmetric matrix: eigenvalues ascending and
/// the matching orthonormal eigenvectors as columns.
pub fn sym_eigen(s: &Mat) -> (Vec<f64>, Mat) {
    let n = s.nrows();
    if n == 0 {
        return (Vec::new(), Mat::zeros(0, 0));
    }
    let dec = to_faer(s)
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("eigendecomposition did not converge");
    let sv = dec.S().column_vector();
    let raw: Vec<f64> = (0..n).map(|j| sv[j]).collect();
    let mut order = descending(&raw);
    order.reverse();
    let u = from_faer(dec.U());
    let vals = order.iter().map(|&j| raw[j]).collect();
    (vals, Mat::from_fn(n, n, |i, j| u[(i, order[j])]))
}

/// Sum of squares of the singular values beyond the first `r`.
pub fn tail_energy(s: &[f64], r: usize) -> f64 {
    s.iter().skip(r).map(|x| x * x).sum()
}

/// Moore-Penrose pseudo-inverse with the crate-wide relative cutoff.
pub fn pinv(m: &Mat) -> Mat {
    pinv_rcond(m, PINV_RCOND)
}

pub fn pinv_rcond(m: &Mat, rcond: f64) -> Mat {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Mat::zeros(cols, rows);
    }
    let d = svd(m);
    let smax = d.s.first().copied().unwrap_or(0.0);
    let cut = rcond * smax;
    let mut out = Mat::zeros(cols, rows);
    for (j, &sj) in d.s.iter().enumerate() {
        if sj <= cut || sj == 0.0 {
            continue;
        }
        let v = d.vt.row(j).transpose();
        let u = d.u.column(j);
        out += (v / sj) * u.transpose();
    }
    out
}

pub fn frob2(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum()
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `||Q^T Q - I||_F`.
pub fn orthogonality_error(q: &Mat) -> f64 {
    let n = q.ncols();
    (q.transpose() * q - Mat::identity(n, n)).norm()
}

pub fn max_asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Orthogonal polar factor `U V^T` of a square matrix.
pub fn polar(m: &Mat) -> Mat {
    let d = svd(m);
    &d.u * &d.vt
}

/// Symmetric PSD square root of a symmetric matrix, clamping eigenvalues in
/// `[-tol, 0)` to zero. Returns the most negative eigenvalue on failure.
pub fn sym_sqrt(s: &Mat, tol: f64) -> std::result::Result<Mat, f64> {
    let n = s.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let sym = (s + s.transpose()) * 0.5;
    let (vals, v) = sym_eigen(&sym);
    let mut roots = Vector::zeros(n);
    for (i, &l) in vals.iter().enumerate() {
        if l < -tol {
            return Err(l);
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let mut r = &v * Mat::from_diagonal(&roots) * v.transpose();
    // exact symmetry
    let rt = r.transpose();
    r = (&r + rt) * 0.5;
    Ok(r)
}

/// Thin QR via Householder reflections: `M = Q R`, `Q` with orthonormal
/// columns (rows x min(rows, cols)), `R` upper triangular.
pub fn qr_thin(m: &Mat) -> (Mat, Mat) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return (Mat::zeros(rows, 0), Mat::zeros(0, cols));
    }
    let qr = m.clone().qr();
    (qr.q(), qr.r())
}

pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// diagonal sign correction).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let g = random_normal(n, n, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Horizontal concatenation `[a, b]`.
pub fn hstack(parts: &[&Mat]) -> Mat {
    let rows = parts.first().map(|m| m.nrows()).unwrap_or(0);
    let cols: usize = parts.iter().map(|m| m.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for p in parts {
        assert_eq!(p.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), (rows, p.ncols())).copy_from(*p);
        c += p.ncols();
    }
    out
}

/// Vertical concatenation `[a; b]`.
pub fn vstack(parts: &[&Mat]) -> Mat {
    let cols = parts.first().map(|m| m.ncols()).unwrap_or(0);
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        assert_eq!(p.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (p.nrows(), cols)).copy_from(*p);
        r += p.nrows();
    }
    out
}

/// Builds a matrix from row-major data.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
