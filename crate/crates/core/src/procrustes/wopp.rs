use serde::{Deserialize, Serialize};

use super::{check_skew, check_symmetric, skew_from_upper};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;

/// One summand `weight * ||left Q right - target||_F^2`.
#[derive(Debug, Clone)]
pub struct WoppTerm {
    pub left: Mat,
    pub right: Mat,
    pub target: Mat,
    pub weight: f64,
}

/// Sum of weighted two-sided Procrustes terms in an `n x n` orthogonal `Q`.
#[derive(Debug, Clone)]
pub struct WoppProblem {
    n: usize,
    terms: Vec<Prepared>,
}

/// Gram form of a term: `w (<A Q B, Q> - 2 <M, Q> + c)` with `A = L^T L`,
/// `B = R R^T`, `M = L^T T R^T`, `c = ||T||^2`.
#[derive(Debug, Clone)]
struct Prepared {
    a: Mat,
    b: Mat,
    m: Mat,
    c: f64,
    w: f64,
}

impl WoppProblem {
    pub fn new(terms: Vec<WoppTerm>) -> Result<Self> {
        let n = terms
            .first()
            .map(|t| t.left.ncols())
            .ok_or_else(|| shape_err("WOPP needs at least one term"))?;
        let mut prepared = Vec::with_capacity(terms.len());
        for t in terms {
            if t.left.ncols() != n || t.right.nrows() != n {
                return Err(shape_err(format!(
                    "WOPP term does not act on an order-{} factor: left {:?}, right {:?}",
                    n,
                    t.left.shape(),
                    t.right.shape()
                )));
            }
            if t.target.shape() != (t.left.nrows(), t.right.ncols()) {
                return Err(shape_err(format!(
                    "WOPP target {:?} does not match {}x{}",
                    t.target.shape(),
                    t.left.nrows(),
                    t.right.ncols()
                )));
            }
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::InvalidConfig(format!("WOPP weight {} must be non-negative", t.weight)));
            }
            if t.weight == 0.0 {
                continue;
            }
            let lt = t.left.transpose();
            prepared.push(Prepared {
                a: &lt * &t.left,
                b: &t.right * t.right.transpose(),
                m: lt * &t.target * t.right.transpose(),
                c: t.target.norm_squared(),
                w: t.weight,
            });
        }
        Ok(Self { n, terms: prepared })
    }

    /// `||C Q A - B||_F^2` with a symmetric left weight `C`.
    pub fn single(c: &Mat, a: &Mat, b: &Mat) -> Result<Self> {
        check_symmetric(c, "left weight")?;
        Self::new(vec![WoppTerm {
            left: c.clone(),
            right: a.clone(),
            target: b.clone(),
            weight: 1.0,
        }])
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn objective(&self, q: &Mat) -> f64 {
        self.terms
            .iter()
            .map(|t| t.w * ((&t.a * q * &t.b).dot(q) - 2.0 * t.m.dot(q) + t.c))
            .sum()
    }

    /// Euclidean gradient with respect to the entries of `Q`.
    pub fn gradient(&self, q: &Mat) -> Mat {
        let mut g = Mat::zeros(self.n, self.n);
        for t in &self.terms {
            g += (&t.a * q * &t.b - &t.m) * (2.0 * t.w);
        }
        g
    }

    fn objective_and_gradient(&self, q: &Mat) -> (f64, Mat) {
        let mut f = 0.0;
        let mut g = Mat::zeros(self.n, self.n);
        for t in &self.terms {
            let aqb = &t.a * q * &t.b;
            f += t.w * (aqb.dot(q) - 2.0 * t.m.dot(q) + t.c);
            g += (aqb - &t.m) * (2.0 * t.w);
        }
        (f, g)
    }

    /// Size of the gradient's constituent terms; round-off puts a floor on
    /// the attainable gradient norm at a small multiple of this.
    fn gradient_scale(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.w * (t.a.norm() * t.b.norm() + t.m.norm()))
            .sum::<f64>()
            .max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WoppOptions {
    pub cg_iters: usize,
    /// Also search the determinant component not containing the start.
    pub both_components: bool,
    pub armijo_c: f64,
    pub shrink: f64,
    pub grad_tol: f64,
    /// Stop after `STALL_STEPS` consecutive near-stationary steps whose
    /// relative decrease is below this.
    pub stall_tol: f64,
    /// Largest entry of `K` before the base point is moved to the current
    /// iterate.
    pub rebase_at: f64,
}

impl Default for WoppOptions {
    fn default() -> Self {
        Self {
            cg_iters: 500,
            both_components: true,
            armijo_c: 1e-4,
            shrink: 0.5,
            grad_tol: 1e-12,
            stall_tol: 1e-14,
            rebase_at: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WoppResult {
    pub q: Mat,
    pub objective: f64,
    pub initial_objective: f64,
    /// Objective after every accepted step of the returned branch, starting
    /// with that branch's initial value.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// The returned `Q` lies in the determinant component opposite to `Q0`.
    pub component_flipped: bool,
}

/// Minimizes the problem over orthogonal `Q` starting from `q0`, using
/// Polak-Ribiere+ conjugate gradients on the skew Cayley parameter `K` of
/// `Q = Q_base (I + K)(I - K)^{-1}` with Armijo backtracking.
pub fn solve_wopp(problem: &WoppProblem, q0: &Mat, opts: &WoppOptions) -> Result<WoppResult> {
    let n = problem.order();
    if q0.shape() != (n, n) {
        return Err(shape_err(format!("Q0 is {:?}, problem has order {}", q0.shape(), n)));
    }
    let f0 = problem.objective(q0);
    if !f0.is_finite() {
        return Err(Error::NonFinite("WOPP objective"));
    }
    let mut best = run_branch(problem, q0, opts)?;
    best.initial_objective = f0;
    if opts.both_components && opts.cg_iters > 0 && n > 0 {
        let mut flipped = q0.clone();
        flipped.column_mut(0).neg_mut();
        let mut other = run_branch(problem, &flipped, opts)?;
        if other.objective < best.objective {
            other.initial_objective = f0;
            other.component_flipped = true;
            best = other;
        }
    }
    Ok(best)
}

struct Eval {
    f: f64,
    g: Vec<f64>,
    q: Mat,
}

fn evaluate(problem: &WoppProblem, base: &Mat, x: &[f64]) -> Result<Eval> {
    let n = problem.order();
    let k = skew_from_upper(n, x)?;
    let (f, grad, q) = cayley_eval(problem, base, &k)?;
    let mut g = Vec::with_capacity(x.len());
    for i in 0..n {
        for j in (i + 1)..n {
            g.push(grad[(i, j)]);
        }
    }
    Ok(Eval { f, g, q })
}

/// Objective at `Q = base (I + K)(I - K)^{-1}`, its gradient with respect
/// to the upper-triangle entries of `K` (returned as a skew matrix) and `Q`.
fn cayley_eval(problem: &WoppProblem, base: &Mat, k: &Mat) -> Result<(f64, Mat, Mat)> {
    let n = problem.order();
    let id = Mat::identity(n, n);
    let s = (&id - k)
        .try_inverse()
        .ok_or(Error::NonFinite("Cayley transform"))?;
    let c = (&id + k) * &s;
    let q = base * &c;
    let (f, gq) = problem.objective_and_gradient(&q);
    // d f / d K = (I + C)^T Q_base^T G (I - K)^{-T}, then antisymmetrized
    // onto the independent upper-triangle parameters.
    let e = (&id + &c).transpose() * base.transpose() * gq * s.transpose();
    Ok((f, &e - e.transpose(), q))
}

impl WoppProblem {
    /// Objective and skew gradient in the Cayley parameter `K` around
    /// `base`: entry `(i, j)`, `i < j`, is the derivative along
    /// `K_ij = -K_ji`.
    pub fn cayley_gradient(&self, base: &Mat, k: &Mat) -> Result<(f64, Mat)> {
        if base.shape() != (self.n, self.n) || k.shape() != (self.n, self.n) {
            return Err(shape_err(format!("Cayley gradient needs order-{} matrices", self.n)));
        }
        check_skew(k)?;
        let (f, g, _) = cayley_eval(self, base, k)?;
        Ok((f, g))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const STALL_STEPS: usize = 3;
/// Relative gradient norm below which a stalled objective ends the search.
const STALL_GRAD: f64 = 1e-8;

fn run_branch(problem: &WoppProblem, q0: &Mat, opts: &WoppOptions) -> Result<WoppResult> {
    let n = problem.order();
    let dim = n * n.saturating_sub(1) / 2;
    let gscale = problem.gradient_scale();
    let mut base = q0.clone();
    let mut x = vec![0.0; dim];
    let mut cur = evaluate(problem, &base, &x)?;
    if !cur.f.is_finite() {
        return Err(Error::NonFinite("WOPP objective"));
    }
    let mut trace = vec![cur.f];
    let mut d: Vec<f64> = cur.g.iter().map(|v| -v).collect();
    let mut since_restart = 0;
    let mut alpha_prev = 1.0;
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;
    let mut stalled = 0;

    while iterations < opts.cg_iters {
        let gnorm = dot(&cur.g, &cur.g).sqrt();
        if gnorm <= opts.grad_tol * gscale || dim == 0 {
            converged = true;
            break;
        }
        let mut gtd = dot(&cur.g, &d);
        if gtd >= 0.0 {
            d = cur.g.iter().map(|v| -v).collect();
            gtd = -gnorm * gnorm;
            since_restart = 0;
        }
        let step = match line_search(problem, &base, &x, &d, cur.f, gtd, alpha_prev, opts)? {
            Some(s) => s,
            None if since_restart > 0 => {
                d = cur.g.iter().map(|v| -v).collect();
                since_restart = 0;
                continue;
            }
            None => {
                line_search_failed = gnorm > 1e-8 * gscale;
                converged = !line_search_failed;
                break;
            }
        };
        iterations += 1;
        let (alpha, next) = step;
        alpha_prev = alpha;
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += alpha * di;
        }
        trace.push(next.f);
        let small_grad = dot(&next.g, &next.g).sqrt() <= STALL_GRAD * gscale;
        if small_grad && cur.f - next.f <= opts.stall_tol * cur.f.abs() {
            stalled += 1;
        } else {
            stalled = 0;
        }

        since_restart += 1;
        let beta = if since_restart >= dim.max(1) {
            since_restart = 0;
            0.0
        } else {
            let diff: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
            (dot(&next.g, &diff) / dot(&cur.g, &cur.g)).max(0.0)
        };
        for (di, gi) in d.iter_mut().zip(&next.g) {
            *di = -gi + beta * *di;
        }
        cur = next;

        if x.iter().fold(0.0f64, |m, v| m.max(v.abs())) > opts.rebase_at {
            base = cur.q.clone();
            x.iter_mut().for_each(|v| *v = 0.0);
            cur = evaluate(problem, &base, &x)?;
            d = cur.g.iter().map(|v| -v).collect();
            since_restart = 0;
        }
        if stalled >= STALL_STEPS {
            converged = true;
            break;
        }
    }

    Ok(WoppResult {
        objective: cur.f,
        initial_objective: trace[0],
        q: cur.q,
        trace,
        iterations,
        converged,
        line_search_failed,
        component_flipped: false,
    })
}

/// Armijo backtracking along `d`; the first trial length grows from the
/// previous accepted one but never moves an entry of `K` by more than 0.5.
#[allow(clippy::too_many_arguments)]
fn line_search(
    problem: &WoppProblem,
    base: &Mat,
    x: &[f64],
    d: &[f64],
    f: f64,
    gtd: f64,
    alpha_prev: f64,
    opts: &WoppOptions,
) -> Result<Option<(f64, Eval)>> {
    let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut alpha = (2.0 * alpha_prev).min(0.5 / dmax);
    let mut trial = vec![0.0; x.len()];
    for _ in 0..80 {
        for ((t, xi), di) in trial.iter_mut().zip(x).zip(d) {
            *t = xi + alpha * di;
        }
        let e = evaluate(problem, base, &trial)?;
        if e.f.is_finite() && e.f <= f + opts.armijo_c * alpha * gtd {
            return Ok(Some((alpha, e)));
        }
        alpha *= opts.shrink;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthogonality_error, random_normal, random_orthogonal, sym_sqrt};
    use crate::procrustes::{cayley, solve_opp};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn psd_root(n: usize, g: &mut ChaCha8Rng) -> Mat {
        let x = random_normal(2 * n, n, g);
        sym_sqrt(&(x.transpose() * x), 1e-10).unwrap()
    }

    fn random_problem(n: usize, seed: u64) -> WoppProblem {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let c1 = psd_root(n, &mut g);
        let c2 = psd_root(n, &mut g);
        WoppProblem::new(vec![
            WoppTerm {
                left: &c1 * random_normal(n, n, &mut g),
                right: Mat::identity(n, n),
                target: random_normal(n, n, &mut g),
                weight: 1.0,
            },
            WoppTerm {
                left: c2,
                right: random_normal(n, n + 2, &mut g),
                target: random_normal(n, n + 2, &mut g),
                weight: 0.7,
            },
        ])
        .unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let p = random_problem(4, seed);
            let mut g = ChaCha8Rng::seed_from_u64(100 + seed);
            let base = random_orthogonal(4, &mut g);
            let x: Vec<f64> = random_normal(6, 1, &mut g).iter().map(|v| 0.3 * v).collect();
            let e = evaluate(&p, &base, &x).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (evaluate(&p, &base, &xp).unwrap().f - evaluate(&p, &base, &xm).unwrap().f) / (2.0 * h);
                let scale = e.g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!((fd - e.g[i]).abs() <= 1e-5 * scale, "{} vs {}", fd, e.g[i]);
            }
        }
    }

    #[test]
    fn euclidean_gradient_matches_direct_objective() {
        let p = random_problem(3, 9);
        let q = random_orthogonal(3, &mut ChaCha8Rng::seed_from_u64(1));
        let g = p.gradient(&q);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[(i, j)] += h;
                qm[(i, j)] -= h;
                let fd = (p.objective(&qp) - p.objective(&qm)) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() < 1e-5 * g.amax());
            }
        }
    }

    #[test]
    fn identity_weight_matches_closed_form() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = random_normal(5, 7, &mut g);
            let b = random_normal(5, 7, &mut g);
            let p = WoppProblem::single(&Mat::identity(5, 5), &a, &b).unwrap();
            let r = solve_wopp(&p, &Mat::identity(5, 5), &WoppOptions::default()).unwrap();
            let opp = (solve_opp(&a, &b).unwrap() * &a - &b).norm_squared();
            assert!((r.objective - opp).abs() < 1e-6, "{} vs {}", r.objective, opp);
            assert!(orthogonality_error(&r.q) < 1e-10);
        }
    }

    #[test]
    fn planted_solution_recovered() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let c = psd_root(n, &mut g);
        let a = random_normal(n, 8, &mut g);
        let k = random_normal(n, n, &mut g) * 0.4;
        let qstar = cayley(&((&k - k.transpose()) * 0.5)).unwrap();
        let b = &c * &qstar * &a;
        let p = WoppProblem::single(&c, &a, &b).unwrap();
        let r = solve_wopp(&p, &Mat::identity(n, n), &WoppOptions::default()).unwrap();
        assert!(r.objective < 1e-8 * b.norm_squared(), "{}", r.objective);
    }

    #[test]
    fn zero_iterations_return_start() {
        let p = random_problem(4, 5);
        let q0 = random_orthogonal(4, &mut ChaCha8Rng::seed_from_u64(6));
        let opts = WoppOptions { cg_iters: 0, ..Default::default() };
        let r = solve_wopp(&p, &q0, &opts).unwrap();
        assert_eq!(r.q, q0);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn nonsymmetric_weight_rejected() {
        let c = Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(WoppProblem::single(&c, &Mat::zeros(2, 2), &Mat::zeros(2, 2)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn monotone_and_orthogonal(seed in any::<u64>(), n in 2usize..6) {
            let p = random_problem(n, seed);
            let q0 = random_orthogonal(n, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a));
            let opts = WoppOptions { cg_iters: 60, ..Default::default() };
            let r = solve_wopp(&p, &q0, &opts).unwrap();
            let f0 = p.objective(&q0);
            prop_assert!(r.objective <= f0 + 1e-9 * f0.abs());
            prop_assert!(orthogonality_error(&r.q) < 1e-10);
            for w in r.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
