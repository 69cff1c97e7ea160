use serde::{Deserialize, Serialize};

use crate::linalg::{svd, Mat};

/// Required gap `min |lambda + 1|` after [`fix_spectrum`]. For orthogonal
/// (hence normal) `Q` this equals the smallest singular value of `I + Q`.
pub const SPECTRUM_GAP: f64 = 1e-6;

/// One modification applied to an orthogonal matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumFix {
    /// `Q <- D_i Q` with `D_i` negating row `i`.
    NegateRow(usize),
    /// `Q <- Q (I - 2 v v^T)` for a unit vector `v`.
    Reflect(Vec<f64>),
}

/// Ordered list of fixes; `fixed = apply(log, original)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumLog {
    pub fixes: Vec<SpectrumFix>,
}

impl SpectrumLog {
    pub fn is_empty(&self) -> bool {
        self.fixes.is_empty()
    }

    /// Applies the fixes in order.
    pub fn apply(&self, q: &Mat) -> Mat {
        let mut out = q.clone();
        for f in &self.fixes {
            apply_fix(&mut out, f);
        }
        out
    }

    /// Undoes the fixes; every fix is an involution, so replaying them in
    /// reverse order recovers the original matrix.
    pub fn restore(&self, q: &Mat) -> Mat {
        let mut out = q.clone();
        for f in self.fixes.iter().rev() {
            apply_fix(&mut out, f);
        }
        out
    }
}

fn apply_fix(q: &mut Mat, fix: &SpectrumFix) {
    match fix {
        SpectrumFix::NegateRow(i) => q.row_mut(*i).neg_mut(),
        SpectrumFix::Reflect(v) => {
            let v = Mat::from_column_slice(v.len(), 1, v);
            let qv = &*q * &v;
            *q -= qv * v.transpose() * 2.0;
        }
    }
}

fn gap(q: &Mat) -> f64 {
    let n = q.nrows();
    if n == 0 {
        return f64::INFINITY;
    }
    let plus = q + Mat::identity(n, n);
    crate::linalg::singular_values(&plus).last().copied().unwrap_or(0.0)
}

/// Negates the first row that leaves `I + Q` well conditioned, or the best
/// available row when none does.
fn negate_best_row(q: &mut Mat, log: &mut SpectrumLog) {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..q.nrows() {
        let mut cand = q.clone();
        cand.row_mut(i).neg_mut();
        let g = gap(&cand);
        if g > best.1 {
            best = (i, g);
        }
        if g > SPECTRUM_GAP {
            break;
        }
    }
    let fix = SpectrumFix::NegateRow(best.0);
    apply_fix(q, &fix);
    log.fixes.push(fix);
}

/// Brings an orthogonal `Q` into the domain of the Cayley inverse: negates
/// one row when `det Q = -1`, then reflects away every eigen-direction with
/// eigenvalue near `-1`. Returns the modified matrix and the log needed to
/// undo the modifications.
pub fn fix_spectrum(q: &Mat) -> (Mat, SpectrumLog) {
    let n = q.nrows();
    let mut out = q.clone();
    let mut log = SpectrumLog::default();
    if n == 0 {
        return (out, log);
    }
    if out.determinant() < 0.0 {
        negate_best_row(&mut out, &mut log);
    }
    // Each reflection removes one -1 direction and flips the determinant;
    // -1 eigenvalues of a rotation come in pairs, so this settles quickly.
    for _ in 0..(2 * n + 2) {
        let plus = &out + Mat::identity(n, n);
        let d = svd(&plus);
        let smallest = d.s.len() - 1;
        if d.s[smallest] <= SPECTRUM_GAP {
            let fix = SpectrumFix::Reflect(d.vt.row(smallest).iter().copied().collect());
            apply_fix(&mut out, &fix);
            log.fixes.push(fix);
        } else if out.determinant() < 0.0 {
            negate_best_row(&mut out, &mut log);
        } else {
            break;
        }
    }
    (out, log)
}
