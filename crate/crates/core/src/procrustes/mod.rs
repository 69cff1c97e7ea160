//! Orthogonal-matrix machinery: the closed-form Procrustes solution, the
//! Cayley and exponential parametrizations, spectrum fixes that make the
//! Cayley inverse well defined, and an iterative solver for the weighted
//! two-sided problem.

mod factor;
mod spectrum;
mod wopp;

pub use factor::{load_factor, save_factor, OrthogonalFactor};
pub use spectrum::{fix_spectrum, SpectrumFix, SpectrumLog, SPECTRUM_GAP};
pub use wopp::{solve_wopp, WoppOptions, WoppProblem, WoppResult, WoppTerm};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{max_asymmetry, orthogonality_error, singular_values, svd, Mat};

/// Below this smallest singular value of `I + Q` the Cayley inverse is
/// treated as undefined.
pub const MINUS_ONE_TOL: f64 = 1e-8;

/// `argmin ||Q A - B||_F` over orthogonal `Q`: `U V^T` from `B A^T = U S V^T`.
pub fn solve_opp(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "OPP operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let d = svd(&(b * a.transpose()));
    Ok(&d.u * &d.vt)
}

pub(crate) fn check_skew(k: &Mat) -> Result<()> {
    if !k.is_square() {
        return Err(shape_err("skew parameter must be square"));
    }
    let asym = (0..k.nrows())
        .flat_map(|i| (i..k.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| (k[(i, j)] + k[(j, i)]).abs())
        .fold(0.0, f64::max);
    let scale = k.amax().max(1.0);
    if asym > 1e-12 * scale || !k.iter().all(|x| x.is_finite()) {
        return Err(Error::NotSkew(asym));
    }
    Ok(())
}

/// `Q = (I + K)(I - K)^{-1}` for skew-symmetric `K`.
pub fn cayley(k: &Mat) -> Result<Mat> {
    check_skew(k)?;
    let n = k.nrows();
    let id = Mat::identity(n, n);
    // (I - K) is invertible for every real skew K, and the two factors commute.
    let lu = (&id - k).lu();
    lu.solve(&(&id + k))
        .ok_or(Error::NonFinite("Cayley transform"))
}

/// `K = (Q - I)(Q + I)^{-1}`, the skew preimage of `Q` under [`cayley`].
pub fn cayley_inverse(q: &Mat) -> Result<Mat> {
    if !q.is_square() {
        return Err(shape_err("Cayley inverse needs a square matrix"));
    }
    let n = q.nrows();
    let oe = orthogonality_error(q);
    if !(oe < 1e-8) {
        return Err(Error::NotOrthogonal(oe));
    }
    let id = Mat::identity(n, n);
    let plus = q + &id;
    if n > 0 && singular_values(&plus).last().copied().unwrap_or(0.0) < MINUS_ONE_TOL {
        return Err(Error::MinusOneEigenvalue);
    }
    let k = plus
        .lu()
        .solve(&(q - &id))
        .ok_or(Error::MinusOneEigenvalue)?;
    Ok((&k - k.transpose()) * 0.5)
}

/// `exp(K)` for skew `K` by scaling and squaring of a Taylor series.
pub fn matrix_exponential_skew(k: &Mat) -> Result<Mat> {
    check_skew(k)?;
    let n = k.nrows();
    let norm1 = (0..n)
        .map(|j| k.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    while norm1 / 2f64.powi(squarings as i32) > 0.25 {
        squarings += 1;
    }
    let a = k / 2f64.powi(squarings as i32);
    let mut out = Mat::identity(n, n);
    let mut term = Mat::identity(n, n);
    for j in 1..=24 {
        term = &term * &a / j as f64;
        out += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        out = &out * &out;
    }
    Ok(out)
}

/// Strict upper triangle of a skew matrix in row-major order.
pub fn skew_to_upper(k: &Mat) -> Vec<f64> {
    let n = k.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(k[(i, j)]);
        }
    }
    out
}

pub fn skew_from_upper(n: usize, upper: &[f64]) -> Result<Mat> {
    let expected = n * n.saturating_sub(1) / 2;
    if upper.len() != expected {
        return Err(shape_err(format!(
            "skew parameter of order {} needs {} values, got {}",
            n,
            expected,
            upper.len()
        )));
    }
    let mut k = Mat::zeros(n, n);
    let mut it = upper.iter();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = *it.next().expect("length checked");
            k[(i, j)] = v;
            k[(j, i)] = -v;
        }
    }
    Ok(k)
}

/// Symmetric check used by problem constructors.
pub(crate) fn check_symmetric(m: &Mat, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(shape_err(format!("{} must be square", what)));
    }
    let tol = 1e-12 * m.amax().max(1.0);
    if max_asymmetry(m) > tol {
        return Err(shape_err(format!("{} is not symmetric", what)));
    }
    Ok(())
}
