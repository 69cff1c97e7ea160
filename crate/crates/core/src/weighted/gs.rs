use serde::Serialize;

use super::{WeightedOptions, WeightedProblem};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{is_finite, pinv, qr_thin, Mat};
use crate::structured::GsMatrix;

/// Convergence summary of the inner least-squares solve of an L-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LStepReport {
    pub iterations: usize,
    pub converged: bool,
}

/// `X P_L` and `Y P_R^T`: with the outer permutations absorbed, the
/// objective reads `||Y_eff - X_eff L P R||`.
fn absorb_perms(p: &WeightedProblem, gs: &GsMatrix) -> Result<(Mat, Mat)> {
    let s = &gs.shape;
    s.validate(p.rows(), p.cols())?;
    let perms = s.resolved_perms();
    Ok((perms.left.right_mul(&p.x), perms.right.right_mul_t(&p.y)))
}

/// Exact minimizer over the R blocks for fixed L: `R_j = (X L P)_j^+ Y_j`
/// column block by column block.
pub fn gs_step_r(p: &WeightedProblem, gs: &GsMatrix) -> Result<Vec<Mat>> {
    let s = &gs.shape;
    let (x_eff, y_eff) = absorb_perms(p, gs)?;
    let xlp = s.resolved_perms().mid.right_mul(&(x_eff * gs.l_dense()));
    let mut out = Vec::with_capacity(s.kr);
    for j in 0..s.kr {
        let zj = xlp.columns(j * s.br1, s.br1).into_owned();
        let rj = pinv(&zj) * y_eff.columns(j * s.br2, s.br2);
        if !is_finite(&rj) {
            return Err(Error::NonFinite("GS R-step"));
        }
        out.push(rj);
    }
    Ok(out)
}

/// Minimizer over the L blocks for fixed R of
/// `||Y - sum_i X_i L_i (P R)_i||`. Each `X_i` and `(P R)_i^T` is
/// QR-factorized, the problem in `M_i = R_{X_i} L_i R_{P_i}^T` (whose
/// operator has orthonormal factors) is solved by CGLS warm-started from the
/// current L, and `L_i` is recovered with pseudo-inverses.
pub fn gs_step_l(p: &WeightedProblem, gs: &GsMatrix, opts: &WeightedOptions) -> Result<(Vec<Mat>, LStepReport)> {
    let s = &gs.shape;
    let (x_eff, y_eff) = absorb_perms(p, gs)?;
    let pr = s.resolved_perms().mid.left_mul(&gs.r_dense());
    let mut qx = Vec::with_capacity(s.kl);
    let mut rx = Vec::with_capacity(s.kl);
    let mut qp = Vec::with_capacity(s.kl);
    let mut rp = Vec::with_capacity(s.kl);
    let mut m = Vec::with_capacity(s.kl);
    for i in 0..s.kl {
        let (q1, r1) = qr_thin(&x_eff.columns(i * s.bl1, s.bl1).into_owned());
        let (q2, r2) = qr_thin(&pr.rows(i * s.bl2, s.bl2).transpose());
        m.push(&r1 * &gs.l[i] * r2.transpose());
        qx.push(q1);
        rx.push(r1);
        qp.push(q2);
        rp.push(r2);
    }
    let forward = |m: &[Mat]| -> Mat {
        let mut out = Mat::zeros(y_eff.nrows(), y_eff.ncols());
        for i in 0..m.len() {
            out += &qx[i] * &m[i] * qp[i].transpose();
        }
        out
    };
    let adjoint = |z: &Mat| -> Vec<Mat> { (0..qx.len()).map(|i| qx[i].transpose() * z * &qp[i]).collect() };
    let report = cgls(&forward, &adjoint, &y_eff, &mut m, opts.ls_iters, opts.ls_tol);

    let mut l = Vec::with_capacity(s.kl);
    for i in 0..s.kl {
        let li = pinv(&rx[i]) * &m[i] * pinv(&rp[i].transpose());
        if !is_finite(&li) {
            return Err(Error::NonFinite("GS L-step"));
        }
        l.push(li);
    }
    Ok((l, report))
}

fn sq_norm(ms: &[Mat]) -> f64 {
    ms.iter().map(|m| m.norm_squared()).sum()
}

/// Conjugate gradients on the normal equations of `min ||y - F(x)||`,
/// updating `x` in place. Stops when `||F^*(y - F x)||` falls below `tol`
/// times `||F^* y||`.
fn cgls<F, A>(forward: &F, adjoint: &A, y: &Mat, x: &mut [Mat], max_iter: usize, tol: f64) -> LStepReport
where
    F: Fn(&[Mat]) -> Mat,
    A: Fn(&Mat) -> Vec<Mat>,
{
    let scale = sq_norm(&adjoint(y)).sqrt();
    let mut r = y - forward(x);
    let mut s = adjoint(&r);
    let mut gamma = sq_norm(&s);
    if scale == 0.0 || gamma.sqrt() <= tol * scale {
        return LStepReport { iterations: 0, converged: true };
    }
    let mut dir = s.clone();
    for it in 1..=max_iter {
        let q = forward(&dir);
        let qq = q.norm_squared();
        if qq == 0.0 {
            return LStepReport { iterations: it - 1, converged: true };
        }
        let alpha = gamma / qq;
        for (xi, di) in x.iter_mut().zip(&dir) {
            *xi += di * alpha;
        }
        r -= q * alpha;
        s = adjoint(&r);
        let next = sq_norm(&s);
        if next.sqrt() <= tol * scale {
            return LStepReport { iterations: it, converged: true };
        }
        let beta = next / gamma;
        gamma = next;
        for (di, si) in dir.iter_mut().zip(&s) {
            *di = si + &*di * beta;
        }
    }
    LStepReport { iterations: max_iter, converged: false }
}

/// Alternates R- and L-steps from `init`. Returns the final matrix, the
/// objective trace (initial value, then one entry per half-step) and
/// whether any inner solve hit its iteration cap.
pub fn gs_weighted_als(p: &WeightedProblem, init: GsMatrix, opts: &WeightedOptions) -> Result<(GsMatrix, Vec<f64>, bool)> {
    let s = &init.shape;
    s.validate(p.rows(), p.cols())?;
    if init.l.len() != s.kl || init.r.len() != s.kr {
        return Err(shape_err("initial GS matrix does not match its shape"));
    }
    let mut cur = init;
    let mut f = p.objective(&cur.materialize());
    let mut trace = vec![f];
    let mut capped = false;
    for _ in 0..opts.iters {
        let r = gs_step_r(p, &cur)?;
        let cand = GsMatrix { r, ..cur.clone() };
        let fc = p.objective(&cand.materialize());
        if fc <= f {
            cur = cand;
            f = fc;
        }
        trace.push(f);

        let (l, rep) = gs_step_l(p, &cur, opts)?;
        capped |= !rep.converged;
        let cand = GsMatrix { l, ..cur.clone() };
        let fc = p.objective(&cand.materialize());
        if fc <= f {
            cur = cand;
            f = fc;
        }
        trace.push(f);
    }
    Ok((cur, trace, capped))
}
