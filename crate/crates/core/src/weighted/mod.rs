//! Projections onto structured classes in the norm `||X (W - W_hat)||_F`
//! with a data-dependent left weight `X`, by alternating exact least
//! squares over the factors.

mod gs;
mod kron;

pub use gs::{gs_step_l, gs_step_r, gs_weighted_als, LStepReport};
pub use kron::{kron_step_a, kron_step_b, kron_weighted_als, KronSystem};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::{max_asymmetry, pinv, Mat};
use crate::structured::{
    gs_project, kron_project, project, BlockZero, BlockZeroShape, StructureSpec, Structured, ZeroPattern,
};

/// `||X (W - W_hat)||^2` with the products `Y = X W`, `X^T X` and `X^T Y`
/// formed once.
#[derive(Debug, Clone)]
pub struct WeightedProblem {
    pub x: Mat,
    pub w: Mat,
    pub y: Mat,
    pub gram: Mat,
    pub xty: Mat,
}

impl WeightedProblem {
    /// `x` must be a symmetric `n x n` weight (typically the square root of
    /// a correlation matrix) and `w` an `n x m` target.
    pub fn new(x: Mat, w: Mat) -> Result<Self> {
        if !x.is_square() || x.nrows() != w.nrows() {
            return Err(shape_err(format!(
                "weight {:?} does not act on a target with {} rows",
                x.shape(),
                w.nrows()
            )));
        }
        if max_asymmetry(&x) > 1e-10 * x.amax().max(1.0) {
            return Err(shape_err("weight matrix is not symmetric"));
        }
        Ok(Self::general(x, w))
    }

    /// Same as [`WeightedProblem::new`] without the symmetry requirement.
    pub(crate) fn general(x: Mat, w: Mat) -> Self {
        let y = &x * &w;
        let xt = x.transpose();
        let gram = &xt * &x;
        let xty = xt * &y;
        Self { x, w, y, gram, xty }
    }

    pub fn rows(&self) -> usize {
        self.w.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w.ncols()
    }

    pub fn objective(&self, w_hat: &Mat) -> f64 {
        (&self.y - &self.x * w_hat).norm_squared()
    }
}

/// Options for [`project_weighted`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightedOptions {
    pub iters: usize,
    pub ls_iters: usize,
    pub ls_tol: f64,
}

impl Default for WeightedOptions {
    fn default() -> Self {
        Self { iters: 10, ls_iters: 200, ls_tol: 1e-12 }
    }
}

/// Outcome of a weighted projection.
#[derive(Debug, Clone)]
pub struct WeightedFit {
    pub value: Structured,
    pub objective: f64,
    /// Objective after initialization and after every half-step.
    pub trace: Vec<f64>,
    /// An inner iterative solve stopped at its cap.
    pub ls_capped: bool,
}

/// Exact weighted projection onto a block-zero pattern. Kept columns are
/// free, so they are copied; kept rows solve `min ||Y - X_1 W_1||`.
pub fn blockzero_weighted(p: &WeightedProblem, shape: BlockZeroShape) -> Result<BlockZero> {
    let (rows, cols) = (p.rows(), p.cols());
    shape.validate(rows, cols)?;
    let d = shape.d;
    let core = match shape.pattern {
        ZeroPattern::ZeroCols => p.w.columns(0, d).into_owned(),
        ZeroPattern::ZeroRows => pinv(&p.x.columns(0, d).into_owned()) * &p.y,
        ZeroPattern::Corner => pinv(&p.x.columns(0, d).into_owned()) * p.y.columns(0, d),
    };
    BlockZero::new(rows, cols, shape, core)
}

/// Weighted projection of `p.w` onto `spec`. Alternating schemes start
/// from `init` when given, else from the unweighted projection.
pub fn project_weighted(
    p: &WeightedProblem,
    spec: &StructureSpec,
    init: Option<&Structured>,
    opts: &WeightedOptions,
) -> Result<WeightedFit> {
    spec.validate(p.rows(), p.cols())?;
    if let Some(i) = init {
        if i.shape() != (p.rows(), p.cols()) || &i.spec() != spec {
            return Err(shape_err("initial value does not match the requested structure"));
        }
    }
    Ok(match spec {
        StructureSpec::Kron(shape) => {
            let start = match init {
                Some(Structured::Kron(k)) => k.clone(),
                _ => kron_project(&p.w, *shape)?,
            };
            let sys = KronSystem::new(p, *shape)?;
            let (value, trace) = kron_weighted_als(p, &sys, opts.iters, start)?;
            WeightedFit {
                objective: *trace.last().expect("trace holds the initial value"),
                value: Structured::Kron(value),
                trace,
                ls_capped: false,
            }
        }
        StructureSpec::Gs(shape) => {
            let start = match init {
                Some(Structured::Gs(g)) => g.clone(),
                _ => gs_project(&p.w, shape)?,
            };
            let (value, trace, ls_capped) = gs_weighted_als(p, start, opts)?;
            WeightedFit {
                objective: *trace.last().expect("trace holds the initial value"),
                value: Structured::Gs(value),
                trace,
                ls_capped,
            }
        }
        StructureSpec::Blockzero(shape) => {
            let value = Structured::BlockZero(blockzero_weighted(p, *shape)?);
            let objective = p.objective(&value.materialize());
            WeightedFit { value, objective, trace: vec![objective], ls_capped: false }
        }
        StructureSpec::None => {
            let value = project(&p.w, spec)?;
            WeightedFit { value, objective: 0.0, trace: vec![0.0], ls_capped: false }
        }
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::linalg::{random_normal, sym_sqrt, Mat};
    use rand_chacha::ChaCha8Rng;

    /// Square root of a random, well-conditioned correlation matrix.
    pub fn psd_root(n: usize, g: &mut ChaCha8Rng) -> Mat {
        let x = random_normal(3 * n, n, g);
        sym_sqrt(&(x.transpose() * x), 1e-10).unwrap()
    }

    /// Dense least squares `min ||y - D theta||` via the pseudo-inverse.
    pub fn lstsq(design: &Mat, y: &[f64]) -> Vec<f64> {
        let yv = Mat::from_column_slice(y.len(), 1, y);
        (crate::linalg::pinv(design) * yv).iter().copied().collect()
    }

    /// Column-major flattening of `m`.
    pub fn vec_of(m: &Mat) -> Vec<f64> {
        m.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::psd_root;
    use super::*;
    use crate::linalg::random_normal;
    use crate::structured::{GsShape, KronShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blockzero_cols_copies_kept_columns() {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let p = WeightedProblem::new(psd_root(5, &mut g), random_normal(5, 4, &mut g)).unwrap();
        let b = blockzero_weighted(&p, BlockZeroShape { d: 2, pattern: ZeroPattern::ZeroCols }).unwrap();
        assert_eq!(b.core, p.w.columns(0, 2).into_owned());
    }

    #[test]
    fn blockzero_rows_and_corner_match_brute_least_squares() {
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let p = WeightedProblem::new(psd_root(5, &mut g), random_normal(5, 4, &mut g)).unwrap();
        for pattern in [ZeroPattern::ZeroRows, ZeroPattern::Corner] {
            let shape = BlockZeroShape { d: 3, pattern };
            let best = p.objective(&blockzero_weighted(&p, shape).unwrap().materialize());
            // Random perturbations of the optimum never improve it.
            let core = blockzero_weighted(&p, shape).unwrap().core;
            for _ in 0..50 {
                let pert = &core + random_normal(core.nrows(), core.ncols(), &mut g) * 1e-3;
                let cand = BlockZero::new(5, 4, shape, pert).unwrap();
                assert!(p.objective(&cand.materialize()) >= best - 1e-12);
            }
            // Gradient of the objective in the free block vanishes.
            let full = blockzero_weighted(&p, shape).unwrap().materialize();
            let grad = p.x.transpose() * (&p.x * &full - &p.y);
            let (r, c) = shape.core_shape(5, 4);
            assert!(grad.view((0, 0), (r, c)).amax() < 1e-10);
        }
    }

    #[test]
    fn identity_weight_reduces_to_unweighted() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let w = random_normal(8, 8, &mut g);
        let p = WeightedProblem::new(Mat::identity(8, 8), w.clone()).unwrap();
        let opts = WeightedOptions { iters: 1, ..Default::default() };
        for spec in [
            StructureSpec::Kron(KronShape { rank: 2, m1: 2, n1: 4, m2: 4, n2: 2 }),
            StructureSpec::Gs(GsShape::new(2, 2, 4, 4, 4, 4)),
        ] {
            let fit = project_weighted(&p, &spec, None, &opts).unwrap();
            let unweighted = (&w - project(&w, &spec).unwrap().materialize()).norm_squared();
            assert!((fit.objective - unweighted).abs() < 1e-10, "{:?}", spec);
        }
    }

    #[test]
    fn asymmetric_weight_rejected() {
        let x = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(WeightedProblem::new(x, Mat::zeros(2, 2)).is_err());
    }
}
