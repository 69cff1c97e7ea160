use super::WeightedProblem;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{is_finite, pinv, Mat};
use crate::structured::{KronShape, KroneckerSum};

/// Contractions of a weighted problem needed by the Kronecker half-steps,
/// in the original block order and in the order with the two factors
/// swapped (`A (x) B` and `B (x) A` differ by a row and a column shuffle).
#[derive(Debug, Clone)]
pub struct KronSystem {
    pub shape: KronShape,
    gram: Mat,
    xty: Mat,
    gram_sw: Mat,
    xty_sw: Mat,
}

impl KronSystem {
    pub fn new(p: &WeightedProblem, shape: KronShape) -> Result<Self> {
        shape.validate(p.rows(), p.cols())?;
        let KronShape { m1, n1, m2, n2, .. } = shape;
        let gram_sw = Mat::from_fn(m1 * m2, m1 * m2, |row, col| {
            let (i, a) = (row / m1, row % m1);
            let (k, c) = (col / m1, col % m1);
            p.gram[(a * m2 + i, c * m2 + k)]
        });
        let xty_sw = Mat::from_fn(m1 * m2, n1 * n2, |row, col| {
            let (i, a) = (row / m1, row % m1);
            let (j, b) = (col / n1, col % n1);
            p.xty[(a * m2 + i, b * n2 + j)]
        });
        Ok(Self {
            shape,
            gram: p.gram.clone(),
            xty: p.xty.clone(),
            gram_sw,
            xty_sw,
        })
    }
}

fn check_factors(fs: &[Mat], rank: usize, rows: usize, cols: usize, what: &str) -> Result<()> {
    if fs.len() != rank || fs.iter().any(|f| f.shape() != (rows, cols)) {
        return Err(shape_err(format!(
            "expected {} {} factors of shape {}x{}",
            rank, what, rows, cols
        )));
    }
    Ok(())
}

/// Minimizes over the first factors for fixed second factors `b`:
/// `A = C^+ D` with `C[(r,a),(s,c)] = <G_ac, B_r B_s^T>` and
/// `D[(r,a), b'] = <H_ab', B_r>`, where `G_ac` and `H_ab'` are blocks of the
/// Gram matrix and of `X^T Y`.
fn first_factor_step(gram: &Mat, xty: &Mat, m1: usize, n1: usize, m2: usize, n2: usize, b: &[Mat]) -> Result<Vec<Mat>> {
    let r = b.len();
    let mut c = Mat::zeros(r * m1, r * m1);
    for s1 in 0..r {
        for s2 in s1..r {
            let bb = &b[s1] * b[s2].transpose();
            for a in 0..m1 {
                for cc in 0..m1 {
                    let v = gram.view((a * m2, cc * m2), (m2, m2)).dot(&bb);
                    c[(s1 * m1 + a, s2 * m1 + cc)] = v;
                    c[(s2 * m1 + cc, s1 * m1 + a)] = v;
                }
            }
        }
    }
    let mut d = Mat::zeros(r * m1, n1);
    for (s, bs) in b.iter().enumerate() {
        for a in 0..m1 {
            for col in 0..n1 {
                d[(s * m1 + a, col)] = xty.view((a * m2, col * n2), (m2, n2)).dot(bs);
            }
        }
    }
    let sol = pinv(&c) * d;
    if !is_finite(&sol) {
        return Err(Error::NonFinite("Kronecker factor step"));
    }
    Ok((0..r).map(|s| sol.rows(s * m1, m1).into_owned()).collect())
}

/// Exact minimizer of `||Y - X sum_r A_r (x) B_r||` over `A` for fixed `B`.
pub fn kron_step_a(sys: &KronSystem, b: &[Mat]) -> Result<Vec<Mat>> {
    let KronShape { rank, m1, n1, m2, n2 } = sys.shape;
    check_factors(b, rank, m2, n2, "B")?;
    first_factor_step(&sys.gram, &sys.xty, m1, n1, m2, n2, b)
}

/// Exact minimizer over `B` for fixed `A`: the A-step of the problem with
/// the factor roles exchanged.
pub fn kron_step_b(sys: &KronSystem, a: &[Mat]) -> Result<Vec<Mat>> {
    let KronShape { rank, m1, n1, m2, n2 } = sys.shape;
    check_factors(a, rank, m1, n1, "A")?;
    first_factor_step(&sys.gram_sw, &sys.xty_sw, m2, n2, m1, n1, a)
}

/// Alternates exact A- and B-steps from `init`. The returned trace holds
/// the objective of `init` followed by the objective after every
/// half-step; a half-step that would increase the objective through
/// round-off is discarded.
pub fn kron_weighted_als(
    p: &WeightedProblem,
    sys: &KronSystem,
    iters: usize,
    init: KroneckerSum,
) -> Result<(KroneckerSum, Vec<f64>)> {
    if init.shape != sys.shape {
        return Err(shape_err("initial Kronecker sum does not match the system shape"));
    }
    let mut cur = init;
    let mut f = p.objective(&cur.materialize());
    let mut trace = vec![f];
    for _ in 0..iters {
        let a = kron_step_a(sys, &cur.b)?;
        let cand = KroneckerSum { a, ..cur.clone() };
        let fc = p.objective(&cand.materialize());
        if fc <= f {
            cur = cand;
            f = fc;
        }
        trace.push(f);

        let b = kron_step_b(sys, &cur.a)?;
        let cand = KroneckerSum { b, ..cur.clone() };
        let fc = p.objective(&cand.materialize());
        if fc <= f {
            cur = cand;
            f = fc;
        }
        trace.push(f);
    }
    Ok((cur, trace))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{lstsq, psd_root, vec_of};
    use super::*;
    use crate::linalg::random_normal;
    use crate::structured::kron_project;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Objective of the dense least-squares problem whose unknowns are the
    /// entries of one factor family, with the other family fixed.
    fn design_oracle(p: &WeightedProblem, fixed: &[Mat], shape: KronShape, solve_a: bool) -> f64 {
        let KronShape { rank, m1, n1, m2, n2 } = shape;
        let (fr, fc) = if solve_a { (m1, n1) } else { (m2, n2) };
        let mut cols = Vec::new();
        for r in 0..rank {
            for jj in 0..fc {
                for ii in 0..fr {
                    let mut e = Mat::zeros(fr, fc);
                    e[(ii, jj)] = 1.0;
                    let term = if solve_a { e.kronecker(&fixed[r]) } else { fixed[r].kronecker(&e) };
                    cols.push(vec_of(&(&p.x * term)));
                }
            }
        }
        let design = Mat::from_fn(cols[0].len(), cols.len(), |i, j| cols[j][i]);
        let theta = lstsq(&design, &vec_of(&p.y));
        let fit = &design * Mat::from_column_slice(theta.len(), 1, &theta);
        (Mat::from_column_slice(fit.len(), 1, &vec_of(&p.y)) - fit).norm_squared()
    }

    fn sample(seed: u64, shape: KronShape, identity: bool) -> (WeightedProblem, KronSystem) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.rows();
        let x = if identity { Mat::identity(n, n) } else { psd_root(n, &mut g) };
        let p = WeightedProblem::new(x, random_normal(n, shape.cols(), &mut g)).unwrap();
        let sys = KronSystem::new(&p, shape).unwrap();
        (p, sys)
    }

    #[test]
    fn half_steps_match_design_matrix_oracle() {
        let shapes = [
            KronShape { rank: 1, m1: 2, n1: 3, m2: 2, n2: 2 },
            KronShape { rank: 2, m1: 2, n1: 2, m2: 3, n2: 2 },
            KronShape { rank: 2, m1: 1, n1: 4, m2: 6, n2: 2 },
        ];
        for (k, &shape) in shapes.iter().enumerate() {
            for identity in [true, false] {
                let (p, sys) = sample(10 + k as u64, shape, identity);
                let mut g = ChaCha8Rng::seed_from_u64(99);
                let b: Vec<Mat> = (0..shape.rank).map(|_| random_normal(shape.m2, shape.n2, &mut g)).collect();
                let a = kron_step_a(&sys, &b).unwrap();
                let got = p.objective(&KroneckerSum::new(a.clone(), b.clone()).unwrap().materialize());
                let want = design_oracle(&p, &b, shape, true);
                assert!((got - want).abs() < 1e-8 * (1.0 + want), "A {:?}: {} vs {}", shape, got, want);

                let bb = kron_step_b(&sys, &a).unwrap();
                let got = p.objective(&KroneckerSum::new(a.clone(), bb).unwrap().materialize());
                let want = design_oracle(&p, &a, shape, false);
                assert!((got - want).abs() < 1e-8 * (1.0 + want), "B {:?}: {} vs {}", shape, got, want);
            }
        }
    }

    #[test]
    fn planted_factors_recovered() {
        let shape = KronShape { rank: 1, m1: 3, n1: 2, m2: 2, n2: 3 };
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let x = psd_root(6, &mut g);
        let a_star = random_normal(3, 2, &mut g);
        let b_star = random_normal(2, 3, &mut g);
        let p = WeightedProblem::new(x, a_star.kronecker(&b_star)).unwrap();
        let sys = KronSystem::new(&p, shape).unwrap();
        let a = kron_step_a(&sys, &[b_star.clone()]).unwrap();
        assert!((&a[0] - &a_star).norm() < 1e-8);
        let b = kron_step_b(&sys, &[a_star]).unwrap();
        assert!((&b[0] - b_star).norm() < 1e-8);
    }

    #[test]
    fn zero_fixed_factor_gives_zero() {
        let shape = KronShape { rank: 2, m1: 2, n1: 2, m2: 2, n2: 2 };
        let (_, sys) = sample(6, shape, false);
        let a = kron_step_a(&sys, &[Mat::zeros(2, 2), Mat::zeros(2, 2)]).unwrap();
        assert!(a.iter().all(|m| m.amax() == 0.0));
        let b = kron_step_b(&sys, &[Mat::zeros(2, 2), Mat::zeros(2, 2)]).unwrap();
        assert!(b.iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn identity_weight_starts_optimal() {
        let shape = KronShape { rank: 2, m1: 2, n1: 3, m2: 3, n2: 2 };
        let (p, sys) = sample(7, shape, true);
        let init = kron_project(&p.w, shape).unwrap();
        let (_, trace) = kron_weighted_als(&p, &sys, 1, init).unwrap();
        assert!((trace[2] - trace[0]).abs() < 1e-10);
    }

    #[test]
    fn zero_iterations_return_init_and_trace_is_monotone() {
        let shape = KronShape { rank: 1, m1: 2, n1: 2, m2: 2, n2: 2 };
        let (p, sys) = sample(8, shape, false);
        let init = kron_project(&p.w, shape).unwrap();
        let (same, trace) = kron_weighted_als(&p, &sys, 0, init.clone()).unwrap();
        assert_eq!(same, init);
        assert_eq!(trace.len(), 1);
        let (_, trace) = kron_weighted_als(&p, &sys, 5, init).unwrap();
        assert!(trace.last().unwrap() <= &trace[0]);
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}
