//! Alternating minimization of the per-layer objective
//! `||X_out (W_out Q - Wo)||^2 + lambda ||X_in (W_in - Q Wi)||^2` over an
//! orthogonal `Q` and structured `Wo`, `Wi`: first in the Frobenius norm
//! with closed-form Procrustes steps, then in the weighted norm with the
//! Cayley conjugate-gradient solver.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::LambdaMode;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{orthogonality_error, singular_values, svd, vstack, Mat, Vector};
use crate::procrustes::{solve_opp, solve_wopp, WoppOptions, WoppProblem, WoppTerm};
use crate::structured::{project, BlockZeroShape, StructureSpec, Structured, ZeroPattern};
use crate::weighted::{project_weighted, WeightedOptions, WeightedProblem};

/// One rotated stream position: the matrix writing into it and the matrix
/// reading from it.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    /// `d_out x n`, rotated on the right.
    pub w_out: Mat,
    /// `n x d_in`, rotated on the left.
    pub w_in: Mat,
    /// `d_out x d_out` symmetric root of the correlation of the inputs of
    /// `w_out`.
    pub x_out: Mat,
    /// `n x n` symmetric root of the correlation of the inputs of `w_in`.
    pub x_in: Mat,
    pub lambda_in: f64,
    pub spec_out: StructureSpec,
    pub spec_in: StructureSpec,
    /// Diagonal weight on the rows of `w_out` used by the Frobenius phase.
    pub row_weight: Option<Vec<f64>>,
    /// Diagonal weight on the columns of `w_in` used by the Frobenius phase.
    pub col_weight: Option<Vec<f64>>,
}

impl LayerProblem {
    pub fn new(
        w_out: Mat,
        w_in: Mat,
        x_out: Mat,
        x_in: Mat,
        lambda_in: f64,
        spec_out: StructureSpec,
        spec_in: StructureSpec,
    ) -> Result<Self> {
        let n = w_out.ncols();
        if w_in.nrows() != n {
            return Err(shape_err(format!(
                "W_out is {:?} and W_in is {:?}; they must share the rotated dimension",
                w_out.shape(),
                w_in.shape()
            )));
        }
        if x_out.shape() != (w_out.nrows(), w_out.nrows()) || x_in.shape() != (n, n) {
            return Err(shape_err(format!(
                "weights {:?} and {:?} do not match W_out {:?}, W_in {:?}",
                x_out.shape(),
                x_in.shape(),
                w_out.shape(),
                w_in.shape()
            )));
        }
        if !(lambda_in >= 0.0 && lambda_in.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_in {} must be non-negative", lambda_in)));
        }
        spec_out.validate(w_out.nrows(), n)?;
        spec_in.validate(n, w_in.ncols())?;
        Ok(Self {
            w_out,
            w_in,
            x_out,
            x_in,
            lambda_in,
            spec_out,
            spec_in,
            row_weight: None,
            col_weight: None,
        })
    }

    /// Identity data weights and `lambda_in = 1`.
    pub fn unweighted(w_out: Mat, w_in: Mat, spec_out: StructureSpec, spec_in: StructureSpec) -> Result<Self> {
        let (d, n) = w_out.shape();
        Self::new(w_out, w_in, Mat::identity(d, d), Mat::identity(n, n), 1.0, spec_out, spec_in)
    }

    pub fn with_diagonal_weights(mut self, rows: Option<Vec<f64>>, cols: Option<Vec<f64>>) -> Result<Self> {
        if rows.as_ref().is_some_and(|r| r.len() != self.w_out.nrows())
            || cols.as_ref().is_some_and(|c| c.len() != self.w_in.ncols())
        {
            return Err(shape_err("diagonal weight length does not match the weight matrix"));
        }
        self.row_weight = rows;
        self.col_weight = cols;
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.w_out.ncols()
    }

    fn dr(&self) -> Option<Mat> {
        self.row_weight.as_ref().map(|v| Mat::from_diagonal(&Vector::from_column_slice(v)))
    }

    fn dc(&self) -> Option<Mat> {
        self.col_weight.as_ref().map(|v| Mat::from_diagonal(&Vector::from_column_slice(v)))
    }

    /// `||Dr (W_out Q - Wo)||^2 + ||(Q^T W_in - Wi) Dc||^2`.
    pub fn frobenius_objective(&self, q: &Mat, w_out_hat: &Mat, w_in_hat: &Mat) -> f64 {
        let mut out = &self.w_out * q - w_out_hat;
        let mut inn = q.transpose() * &self.w_in - w_in_hat;
        if let Some(r) = &self.row_weight {
            for (i, w) in r.iter().enumerate() {
                out.row_mut(i).scale_mut(*w);
            }
        }
        if let Some(c) = &self.col_weight {
            for (j, w) in c.iter().enumerate() {
                inn.column_mut(j).scale_mut(*w);
            }
        }
        out.norm_squared() + inn.norm_squared()
    }

    /// `||X_out (W_out Q - Wo)||^2 + lambda ||X_in (W_in - Q Wi)||^2`.
    pub fn weighted_objective(&self, q: &Mat, w_out_hat: &Mat, w_in_hat: &Mat) -> f64 {
        let out = (&self.x_out * (&self.w_out * q - w_out_hat)).norm_squared();
        if self.lambda_in == 0.0 {
            return out;
        }
        out + self.lambda_in * (&self.x_in * (&self.w_in - q * w_in_hat)).norm_squared()
    }

    fn frobenius_scale(&self) -> f64 {
        self.frobenius_objective(
            &Mat::identity(self.order(), self.order()),
            &Mat::zeros(self.w_out.nrows(), self.order()),
            &Mat::zeros(self.order(), self.w_in.ncols()),
        )
    }

    fn weighted_scale(&self) -> f64 {
        (&self.x_out * &self.w_out).norm_squared() + self.lambda_in * (&self.x_in * &self.w_in).norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlsOptions {
    pub frobenius_iters: usize,
    pub weighted_iters: usize,
    pub projection: WeightedOptions,
    pub wopp: WoppOptions,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            frobenius_iters: 50,
            weighted_iters: 1,
            projection: WeightedOptions::default(),
            wopp: WoppOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Frobenius,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub phase: Phase,
    pub iterations: usize,
    /// Objective after the initial projection and after every iteration.
    pub trace: Vec<f64>,
    pub final_objective: f64,
    /// Objective of the zero approximation, the normalizer of
    /// `relative_residual`.
    pub scale: f64,
    /// `sqrt(final_objective / scale)`.
    pub relative_residual: f64,
    pub orthogonality_error: f64,
    /// Conjugate-gradient iterations spent by each rotation update.
    pub rotation_iterations: Vec<usize>,
    pub line_search_failed: bool,
    pub projection_capped: bool,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl SolveReport {
    fn new(phase: Phase, scale: f64) -> Self {
        Self {
            phase,
            iterations: 0,
            trace: Vec::new(),
            final_objective: 0.0,
            scale,
            relative_residual: 0.0,
            orthogonality_error: 0.0,
            rotation_iterations: Vec::new(),
            line_search_failed: false,
            projection_capped: false,
            wall_time: Duration::ZERO,
        }
    }

    fn finish(&mut self, q: &Mat, started: Instant) {
        self.final_objective = *self.trace.last().expect("trace holds the initial projection");
        self.relative_residual = if self.scale > 0.0 {
            (self.final_objective / self.scale).max(0.0).sqrt()
        } else {
            0.0
        };
        self.orthogonality_error = orthogonality_error(q);
        self.wall_time = started.elapsed();
    }
}

#[derive(Debug, Clone)]
pub struct LayerSolution {
    pub q: Mat,
    pub w_out_hat: Structured,
    pub w_in_hat: Structured,
    pub report: SolveReport,
}

/// Minimizer of `||X (target - W)||` over `spec`. Without a weight this is
/// the exact projection; with one, the alternating scheme starts from the
/// better of `prev` and the unweighted projection.
fn fit(
    x: Option<&Mat>,
    target: Mat,
    spec: &StructureSpec,
    prev: Option<&Structured>,
    opts: &WeightedOptions,
) -> Result<(Structured, bool)> {
    let Some(x) = x else {
        return Ok((project(&target, spec)?, false));
    };
    let p = WeightedProblem::new(x.clone(), target)?;
    let mut init = project(&p.w, spec)?;
    if let Some(prev) = prev {
        if p.objective(&prev.materialize()) < p.objective(&init.materialize()) {
            init = prev.clone();
        }
    }
    let fit = project_weighted(&p, spec, Some(&init), opts)?;
    Ok((fit.value, fit.ls_capped))
}

/// Fits `Wi` to `target` in `||(target - Wi) Dc||` by fitting the transpose.
fn fit_columns(
    dc: Option<&Mat>,
    target: Mat,
    spec: &StructureSpec,
    prev: Option<&Structured>,
    opts: &WeightedOptions,
) -> Result<(Structured, bool)> {
    if dc.is_none() {
        return fit(None, target, spec, prev, opts);
    }
    let prev_t = prev.map(Structured::transposed);
    let (s, capped) = fit(dc, target.transpose(), &spec.transposed(), prev_t.as_ref(), opts)?;
    Ok((s.transposed(), capped))
}

/// Frobenius-norm ALS from `Q = I`: structured projections alternate with
/// the closed-form Procrustes rotation of the stacked matrix
/// `[Dr W_out; Dc W_in^T]`. The projections are refreshed after the last
/// rotation, so `n_iters = 0` projects the unrotated weights.
pub fn als_frobenius(problem: &LayerProblem, n_iters: usize, proj: &WeightedOptions) -> Result<LayerSolution> {
    let started = Instant::now();
    let n = problem.order();
    let (dr, dc) = (problem.dr(), problem.dc());
    let mut report = SolveReport::new(Phase::Frobenius, problem.frobenius_scale());

    let mut q = Mat::identity(n, n);
    let (mut wo, c1) = fit(dr.as_ref(), problem.w_out.clone(), &problem.spec_out, None, proj)?;
    let (mut wi, c2) = fit_columns(dc.as_ref(), problem.w_in.clone(), &problem.spec_in, None, proj)?;
    report.projection_capped |= c1 || c2;
    report.trace.push(problem.frobenius_objective(&q, &wo.materialize(), &wi.materialize()));

    let scaled_rows = |m: &Mat| match &dr {
        Some(d) => d * m,
        None => m.clone(),
    };
    let scaled_cols_t = |m: &Mat| match &dc {
        Some(d) => d * m.transpose(),
        None => m.transpose(),
    };
    let source = vstack(&[&scaled_rows(&problem.w_out), &scaled_cols_t(&problem.w_in)]);
    for _ in 0..n_iters {
        let target = vstack(&[&scaled_rows(&wo.materialize()), &scaled_cols_t(&wi.materialize())]);
        q = solve_opp(&source.transpose(), &target.transpose())?.transpose();
        let (o, c1) = fit(dr.as_ref(), &problem.w_out * &q, &problem.spec_out, Some(&wo), proj)?;
        let (i, c2) = fit_columns(dc.as_ref(), q.transpose() * &problem.w_in, &problem.spec_in, Some(&wi), proj)?;
        wo = o;
        wi = i;
        report.projection_capped |= c1 || c2;
        report.trace.push(problem.frobenius_objective(&q, &wo.materialize(), &wi.materialize()));
        report.iterations += 1;
    }
    report.finish(&q, started);
    Ok(LayerSolution { q, w_out_hat: wo, w_in_hat: wi, report })
}

const STALL_TOL: f64 = 1e-14;
const STALL_STEPS: usize = 3;

/// True once the last `STALL_STEPS` iterations each decreased the objective
/// by a relative amount below `STALL_TOL`.
fn stalled(trace: &[f64]) -> bool {
    trace.len() > STALL_STEPS
        && trace[trace.len() - STALL_STEPS - 1..]
            .windows(2)
            .all(|w| w[0] - w[1] <= STALL_TOL * w[0].abs())
}

/// Weighted-norm ALS from `Q = I` on weights that are already rotated by
/// the Frobenius phase. Each iteration updates `Q` with the Cayley
/// conjugate-gradient solver on the full objective and then refreshes the
/// weighted projections; `init` seeds the first projections. Stops early
/// once the objective has stalled.
pub fn als_weighted(
    problem: &LayerProblem,
    n_iters: usize,
    opts: &AlsOptions,
    init: Option<(&Structured, &Structured)>,
) -> Result<LayerSolution> {
    let started = Instant::now();
    let n = problem.order();
    let proj = &opts.projection;
    let mut report = SolveReport::new(Phase::Weighted, problem.weighted_scale());

    let project_in = |q: &Mat, prev: Option<&Structured>| {
        let xq = &problem.x_in * q;
        let xq = q.transpose() * xq;
        let sym = (&xq + xq.transpose()) * 0.5;
        fit(Some(&sym), q.transpose() * &problem.w_in, &problem.spec_in, prev, proj)
    };

    let mut q = Mat::identity(n, n);
    let (mut wo, c1) = fit(Some(&problem.x_out), problem.w_out.clone(), &problem.spec_out, init.map(|i| i.0), proj)?;
    let (mut wi, c2) = project_in(&q, init.map(|i| i.1))?;
    report.projection_capped |= c1 || c2;
    report.trace.push(problem.weighted_objective(&q, &wo.materialize(), &wi.materialize()));

    let left_out = &problem.x_out * &problem.w_out;
    let target_in = &problem.x_in * &problem.w_in;
    for _ in 0..n_iters {
        let wi_dense = wi.materialize();
        let wopp = WoppProblem::new(vec![
            WoppTerm {
                left: left_out.clone(),
                right: Mat::identity(n, n),
                target: &problem.x_out * wo.materialize(),
                weight: 1.0,
            },
            WoppTerm {
                left: problem.x_in.clone(),
                right: wi_dense,
                target: target_in.clone(),
                weight: problem.lambda_in,
            },
        ])?;
        // Later solves warm-start from a rotation already chosen between
        // the two determinant components.
        let wopp_opts = WoppOptions { both_components: opts.wopp.both_components && report.iterations == 0, ..opts.wopp };
        let res = solve_wopp(&wopp, &q, &wopp_opts)?;
        q = res.q;
        report.rotation_iterations.push(res.iterations);
        report.line_search_failed |= res.line_search_failed;

        let (o, c1) = fit(Some(&problem.x_out), &problem.w_out * &q, &problem.spec_out, Some(&wo), proj)?;
        let (i, c2) = project_in(&q, Some(&wi))?;
        wo = o;
        wi = i;
        report.projection_capped |= c1 || c2;
        report.trace.push(problem.weighted_objective(&q, &wo.materialize(), &wi.materialize()));
        report.iterations += 1;
        if stalled(&report.trace) {
            break;
        }
    }
    report.finish(&q, started);
    Ok(LayerSolution { q, w_out_hat: wo, w_in_hat: wi, report })
}

/// Weight of the in-term: one, or the ratio of the weighted norms of the
/// two weight matrices.
pub fn compute_lambda_in(problem: &LayerProblem, mode: LambdaMode) -> Result<f64> {
    match mode {
        LambdaMode::One => Ok(1.0),
        LambdaMode::Balanced => {
            let num = (&problem.x_out * &problem.w_out).norm_squared();
            let den = (&problem.x_in * &problem.w_in).norm_squared();
            if den == 0.0 {
                return Err(Error::DivisionByZero("||X_in W_in|| is zero"));
            }
            Ok(num / den)
        }
    }
}

/// Both sides of the slicing equivalence for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEquivalence {
    pub d: usize,
    /// Objective of the principal-component rotation and slicing.
    pub closed_form: f64,
    /// Sum of squared singular values of `X_out W_out + X_skip` past `d`.
    pub singular_tail: f64,
    /// Objective reached by weighted ALS with the block-zero class.
    pub generic: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Compares the slicing closed form with the generic optimizer on
/// `min ||(X_out W_out + X_skip) Q - (X_out Wo + X_skip Ws)||^2` where
/// `Wo`, `Ws` keep only their first `d` columns. `x_out` is `s x d_out`,
/// `w_out` is `d_out x n` and `x_skip` is `s x n`.
pub fn slicegpt_equivalence_check(
    x_out: &Mat,
    w_out: &Mat,
    x_skip: &Mat,
    d: usize,
    iters: usize,
    opts: &AlsOptions,
) -> Result<SliceEquivalence> {
    let n = w_out.ncols();
    if x_out.ncols() != w_out.nrows() || x_skip.shape() != (x_out.nrows(), n) || d > n {
        return Err(shape_err(format!(
            "slicing check: X_out {:?}, W_out {:?}, X_skip {:?}, d = {}",
            x_out.shape(),
            w_out.shape(),
            x_skip.shape(),
            d
        )));
    }
    let m = x_out * w_out + x_skip;
    let dec = svd(&m);
    let mut q = dec.vt.transpose();
    if q.ncols() < n {
        // Complete the right singular basis when `m` has fewer rows than columns.
        let full = svd(&vstack(&[&m, &Mat::zeros(n - m.nrows(), n)]));
        q = full.vt.transpose();
    }
    let keep = Mat::from_fn(n, n, |i, j| if i == j && i < d { 1.0 } else { 0.0 });
    let w_out_hat = w_out * &q * &keep;
    let w_skip_hat = &q * &keep;
    let closed_form = ((&m * &q) - (x_out * w_out_hat + x_skip * w_skip_hat)).norm_squared();
    let sv = singular_values(&m);
    let singular_tail = sv.iter().skip(d).map(|s| s * s).sum();

    let data = crate::linalg::hstack(&[x_out, x_skip]);
    let stacked = vstack(&[w_out, &Mat::identity(n, n)]);
    let root = crate::calib::correlation_root(&(data.transpose() * &data))?;
    let problem = LayerProblem::new(
        stacked,
        Mat::zeros(n, 0),
        root,
        Mat::identity(n, n),
        0.0,
        StructureSpec::Blockzero(BlockZeroShape { d, pattern: ZeroPattern::ZeroCols }),
        StructureSpec::None,
    )?;
    let sol = als_weighted(&problem, iters, opts, None)?;
    let generic = sol.report.final_objective;
    Ok(SliceEquivalence {
        d,
        closed_form,
        singular_tail,
        generic,
        gap: (generic - closed_form).abs(),
        iterations: sol.report.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_normal, random_orthogonal};
    use crate::structured::{kron_project, KronShape, KroneckerSum};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kron_sum(shape: KronShape, g: &mut ChaCha8Rng) -> Mat {
        let a = (0..shape.rank).map(|_| random_normal(shape.m1, shape.n1, g)).collect();
        let b = (0..shape.rank).map(|_| random_normal(shape.m2, shape.n2, g)).collect();
        KroneckerSum::new(a, b).unwrap().materialize()
    }

    fn planted(seed: u64) -> (LayerProblem, Mat) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let out = KronShape { rank: 2, m1: 1, n1: 4, m2: 16, n2: 4 };
        let q_star = random_orthogonal(16, &mut g);
        let w_out = kron_sum(out, &mut g) * q_star.transpose();
        let w_in = Mat::zeros(16, 0);
        let p = LayerProblem::unweighted(w_out, w_in, StructureSpec::Kron(out), StructureSpec::None).unwrap();
        (p, q_star)
    }

    fn random_problem(seed: u64, spec_out: StructureSpec, spec_in: StructureSpec) -> LayerProblem {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let w_out = random_normal(6, 4, &mut g);
        let w_in = random_normal(4, 6, &mut g);
        let xo = random_normal(9, 6, &mut g);
        let xi = random_normal(9, 4, &mut g);
        let x_out = crate::calib::correlation_root(&(xo.transpose() * xo)).unwrap();
        let x_in = crate::calib::correlation_root(&(xi.transpose() * xi)).unwrap();
        LayerProblem::new(w_out, w_in, x_out, x_in, 0.7, spec_out, spec_in).unwrap()
    }

    fn kron_specs() -> (StructureSpec, StructureSpec) {
        (
            StructureSpec::Kron(KronShape { rank: 1, m1: 1, n1: 2, m2: 6, n2: 2 }),
            StructureSpec::Kron(KronShape { rank: 1, m1: 2, n1: 1, m2: 2, n2: 6 }),
        )
    }

    #[test]
    fn frobenius_recovers_planted_rotation() {
        for seed in 0..5 {
            let (p, _) = planted(seed);
            let sol = als_frobenius(&p, 50, &WeightedOptions::default()).unwrap();
            let scale = p.w_out.norm_squared() + p.w_in.norm_squared();
            assert!(sol.report.final_objective < 1e-10 * scale, "seed {}: {:?}", seed, sol.report.trace);
            assert!(sol.report.orthogonality_error < 1e-10);
            let direct = project(&p.w_out, &p.spec_out).unwrap().materialize();
            assert!((&p.w_out - direct).norm() > 0.1 * p.w_out.norm());
        }
    }

    #[test]
    fn zero_iterations_project_unrotated_weights() {
        let (p, _) = planted(9);
        let sol = als_frobenius(&p, 0, &WeightedOptions::default()).unwrap();
        assert_eq!(sol.q, Mat::identity(16, 16));
        assert_eq!(sol.w_out_hat, project(&p.w_out, &p.spec_out).unwrap());
        assert_eq!(sol.w_in_hat, project(&p.w_in, &p.spec_in).unwrap());
        assert_eq!(sol.report.trace.len(), 1);
    }

    #[test]
    fn full_blockzero_is_exact() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let full = |p| StructureSpec::Blockzero(BlockZeroShape { d: 5, pattern: p });
        let p = LayerProblem::unweighted(
            random_normal(3, 5, &mut g),
            random_normal(5, 4, &mut g),
            full(ZeroPattern::ZeroCols),
            full(ZeroPattern::ZeroRows),
        )
        .unwrap();
        let sol = als_frobenius(&p, 1, &WeightedOptions::default()).unwrap();
        assert!(sol.report.trace[1] < 1e-20);
    }

    #[test]
    fn frobenius_objective_invariant_under_pattern_preserving_rotation() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let bz = |p| StructureSpec::Blockzero(BlockZeroShape { d: 2, pattern: p });
        let p = LayerProblem::unweighted(
            random_normal(3, 5, &mut g),
            random_normal(5, 4, &mut g),
            bz(ZeroPattern::ZeroCols),
            bz(ZeroPattern::ZeroRows),
        )
        .unwrap();
        let sol = als_frobenius(&p, 10, &WeightedOptions::default()).unwrap();
        let (wo, wi) = (sol.w_out_hat.materialize(), sol.w_in_hat.materialize());
        let mut r = Mat::zeros(5, 5);
        r.view_mut((0, 0), (2, 2)).copy_from(&random_orthogonal(2, &mut g));
        r.view_mut((2, 2), (3, 3)).copy_from(&random_orthogonal(3, &mut g));
        let before = p.frobenius_objective(&sol.q, &wo, &wi);
        let after = p.frobenius_objective(&(&sol.q * &r), &(&wo * &r), &(r.transpose() * &wi));
        assert!((before - after).abs() < 1e-10 * (1.0 + before));
        assert_eq!((&wo * &r).columns(2, 3).amax(), 0.0);
    }

    #[test]
    fn diagonal_weights_enter_the_frobenius_phase() {
        let (spec_out, spec_in) = kron_specs();
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let p = LayerProblem::unweighted(random_normal(6, 4, &mut g), random_normal(4, 6, &mut g), spec_out, spec_in)
            .unwrap()
            .with_diagonal_weights(Some(vec![1.0, 2.0, 3.0, 1.0, 0.5, 4.0]), Some(vec![2.0; 6]))
            .unwrap();
        let sol = als_frobenius(&p, 20, &WeightedOptions::default()).unwrap();
        let t = &sol.report.trace;
        assert!(t.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-12), "{:?}", t);
        let recomputed = p.frobenius_objective(&sol.q, &sol.w_out_hat.materialize(), &sol.w_in_hat.materialize());
        assert!((recomputed - sol.report.final_objective).abs() < 1e-12 * (1.0 + recomputed));
        assert!(p.clone().with_diagonal_weights(Some(vec![1.0]), None).is_err());
    }

    #[test]
    fn identity_weights_reduce_to_frobenius() {
        for seed in 0..4 {
            let (spec_out, spec_in) = kron_specs();
            let mut g = ChaCha8Rng::seed_from_u64(20 + seed);
            let p =
                LayerProblem::unweighted(random_normal(6, 4, &mut g), random_normal(4, 6, &mut g), spec_out, spec_in)
                    .unwrap();
            let frob = als_frobenius(&p, 1, &WeightedOptions::default()).unwrap();
            let weighted = als_weighted(&p, 1, &AlsOptions::default(), None).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() < 1e-8 * (1.0 + b);
            assert!(close(weighted.report.trace[0], frob.report.trace[0]));
            assert!(
                close(weighted.report.trace[1], frob.report.trace[1]),
                "{:?} vs {:?}",
                weighted.report.trace,
                frob.report.trace
            );
        }
    }

    #[test]
    fn no_rotation_steps_give_pure_weighted_projection() {
        let (spec_out, spec_in) = kron_specs();
        let p = random_problem(6, spec_out.clone(), spec_in);
        let opts = AlsOptions { wopp: WoppOptions { cg_iters: 0, ..Default::default() }, ..Default::default() };
        let sol = als_weighted(&p, 1, &opts, None).unwrap();
        assert_eq!(sol.q, Mat::identity(4, 4));
        let wp = WeightedProblem::new(p.x_out.clone(), p.w_out.clone()).unwrap();
        let direct = project_weighted(&wp, &spec_out, None, &WeightedOptions::default()).unwrap();
        let got = wp.objective(&sol.w_out_hat.materialize());
        assert!(got <= direct.objective * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn weighted_recovers_planted_rotation_with_identity_weights() {
        let (p, _) = planted(1);
        let frob = als_frobenius(&p, 50, &WeightedOptions::default()).unwrap();
        let rotated = LayerProblem::unweighted(
            &p.w_out * &frob.q,
            frob.q.transpose() * &p.w_in,
            p.spec_out.clone(),
            p.spec_in.clone(),
        )
        .unwrap();
        let sol = als_weighted(&rotated, 2, &AlsOptions::default(), None).unwrap();
        let scale = p.w_out.norm_squared() + p.w_in.norm_squared();
        assert!(sol.report.final_objective < 1e-10 * scale, "{:?}", sol.report.trace);
    }

    #[test]
    fn weighted_trace_is_monotone_and_consistent() {
        let (spec_out, spec_in) = kron_specs();
        let p = random_problem(7, spec_out, spec_in);
        let sol = als_weighted(&p, 5, &AlsOptions::default(), None).unwrap();
        let t = &sol.report.trace;
        assert_eq!(t.len(), 6);
        assert!(t.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{:?}", t);
        let recomputed = p.weighted_objective(&sol.q, &sol.w_out_hat.materialize(), &sol.w_in_hat.materialize());
        assert!((recomputed - sol.report.final_objective).abs() < 1e-10 * (1.0 + recomputed));
        assert!(sol.report.orthogonality_error < 1e-10);
        let js = serde_json::to_value(&sol.report).unwrap();
        assert!(js.get("wall_time").is_none());
    }

    #[test]
    fn lambda_modes() {
        let (spec_out, spec_in) = kron_specs();
        let p = random_problem(8, spec_out, spec_in);
        assert_eq!(compute_lambda_in(&p, LambdaMode::One).unwrap(), 1.0);
        let got = compute_lambda_in(&p, LambdaMode::Balanced).unwrap();
        let so = p.x_out.transpose() * &p.x_out;
        let si = p.x_in.transpose() * &p.x_in;
        let want = (p.w_out.transpose() * so * &p.w_out).trace() / (p.w_in.transpose() * si * &p.w_in).trace();
        assert!((got - want).abs() < 1e-10 * want);

        let mut g = ChaCha8Rng::seed_from_u64(9);
        let w = random_normal(4, 4, &mut g);
        let x = random_normal(4, 4, &mut g);
        let x = crate::calib::correlation_root(&(x.transpose() * x)).unwrap();
        let sym = LayerProblem::new(w.clone(), w, x.clone(), x, 1.0, StructureSpec::None, StructureSpec::None).unwrap();
        assert!((compute_lambda_in(&sym, LambdaMode::Balanced).unwrap() - 1.0).abs() < 1e-12);

        let mut zero = sym.clone();
        zero.w_in = Mat::zeros(4, 4);
        assert!(matches!(compute_lambda_in(&zero, LambdaMode::Balanced), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn problem_shapes_are_checked() {
        let bad = LayerProblem::unweighted(Mat::zeros(3, 4), Mat::zeros(5, 2), StructureSpec::None, StructureSpec::None);
        assert!(bad.is_err());
        let neg = LayerProblem::new(
            Mat::zeros(2, 2),
            Mat::zeros(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            -1.0,
            StructureSpec::None,
            StructureSpec::None,
        );
        assert!(neg.is_err());
    }

    #[test]
    fn slicing_closed_form_matches_generic_optimizer() {
        let mut g = ChaCha8Rng::seed_from_u64(10);
        let x_out = random_normal(6, 6, &mut g);
        let w_out = random_normal(6, 6, &mut g);
        let x_skip = random_normal(6, 6, &mut g);
        let r = slicegpt_equivalence_check(&x_out, &w_out, &x_skip, 3, 300, &AlsOptions::default()).unwrap();
        assert!((r.closed_form - r.singular_tail).abs() < 1e-10 * (1.0 + r.singular_tail));
        assert!(r.gap < 1e-6, "{:?}", r);

        let m = &x_out * &w_out + &x_skip;
        let none = slicegpt_equivalence_check(&x_out, &w_out, &x_skip, 0, 5, &AlsOptions::default()).unwrap();
        assert!((none.closed_form - m.norm_squared()).abs() < 1e-9 * m.norm_squared());
        assert!((none.generic - m.norm_squared()).abs() < 1e-9 * m.norm_squared());
        let all = slicegpt_equivalence_check(&x_out, &w_out, &x_skip, 6, 5, &AlsOptions::default()).unwrap();
        assert!(all.closed_form < 1e-18 * m.norm_squared() && all.generic < 1e-18 * m.norm_squared());
    }

    #[test]
    fn direct_projection_is_worse_than_rotated_on_planted_data() {
        let (p, q_star) = planted(2);
        let direct = kron_project(&p.w_out, match p.spec_out {
            StructureSpec::Kron(s) => s,
            _ => unreachable!(),
        })
        .unwrap();
        let aligned = &p.w_out * &q_star;
        let rel = |w: &Mat, a: &Mat| (w - a).norm() / w.norm();
        assert!(rel(&p.w_out, &direct.materialize()) > 0.1);
        assert!(rel(&aligned, &project(&aligned, &p.spec_out).unwrap().materialize()) < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn frobenius_trace_monotone(seed in any::<u64>(), iters in 1usize..8) {
            let (spec_out, spec_in) = kron_specs();
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let p = LayerProblem::unweighted(random_normal(6, 4, &mut g), random_normal(4, 6, &mut g), spec_out, spec_in).unwrap();
            let sol = als_frobenius(&p, iters, &WeightedOptions::default()).unwrap();
            let t = &sol.report.trace;
            prop_assert!(t.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{:?}", t);
            prop_assert!(sol.report.orthogonality_error < 1e-10);
        }

        #[test]
        fn weighted_trace_monotone(seed in any::<u64>()) {
            let (spec_out, spec_in) = kron_specs();
            let p = random_problem(seed, spec_out, spec_in);
            let sol = als_weighted(&p, 3, &AlsOptions::default(), None).unwrap();
            let t = &sol.report.trace;
            prop_assert!(t.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{:?}", t);
        }
    }
}
