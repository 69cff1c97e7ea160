//! Structured matrix classes: Kronecker sums, GS-matrices and block-zero
//! matrices, plus a dense pass-through used where no structure is imposed.

mod blockzero;
mod gs;
mod kron;
mod perm;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use blockzero::{blockzero_project, BlockZero, BlockZeroShape, ZeroPattern};
pub use gs::{gs_project, GsMatrix, GsPerms, GsShape};
pub use kron::{kron_project, rearrange_kron, unrearrange_kron, KronShape, KroneckerSum};
pub use perm::Perm;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;
use crate::tensorfile::{read_tensor, write_tensor, Tensor};

/// Selects a structured class and its shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StructureSpec {
    Kron(KronShape),
    Gs(GsShape),
    Blockzero(BlockZeroShape),
    /// No structure: the matrix is kept dense.
    None,
}

impl StructureSpec {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        match self {
            StructureSpec::Kron(s) => s.validate(rows, cols),
            StructureSpec::Gs(s) => s.validate(rows, cols),
            StructureSpec::Blockzero(s) => s.validate(rows, cols),
            StructureSpec::None => Ok(()),
        }
    }

    pub fn transposed(&self) -> Self {
        match self {
            StructureSpec::Kron(s) => StructureSpec::Kron(s.transposed()),
            StructureSpec::Gs(s) => StructureSpec::Gs(s.transposed()),
            StructureSpec::Blockzero(s) => StructureSpec::Blockzero(BlockZeroShape {
                d: s.d,
                pattern: s.pattern.transposed(),
            }),
            StructureSpec::None => StructureSpec::None,
        }
    }

    pub fn param_count(&self, rows: usize, cols: usize) -> usize {
        match self {
            StructureSpec::Kron(s) => s.param_count(),
            StructureSpec::Gs(s) => s.param_count(),
            StructureSpec::Blockzero(s) => s.param_count(rows, cols),
            StructureSpec::None => rows * cols,
        }
    }
}

/// A matrix held in one of the structured representations.
#[derive(Debug, Clone, PartialEq)]
pub enum Structured {
    Kron(KroneckerSum),
    Gs(GsMatrix),
    BlockZero(BlockZero),
    Dense(Mat),
}

impl Structured {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Structured::Kron(k) => (k.shape.rows(), k.shape.cols()),
            Structured::Gs(g) => (g.shape.rows(), g.shape.cols()),
            Structured::BlockZero(b) => (b.rows, b.cols),
            Structured::Dense(m) => m.shape(),
        }
    }

    pub fn spec(&self) -> StructureSpec {
        match self {
            Structured::Kron(k) => StructureSpec::Kron(k.shape),
            Structured::Gs(g) => StructureSpec::Gs(g.shape.clone()),
            Structured::BlockZero(b) => StructureSpec::Blockzero(b.shape),
            Structured::Dense(_) => StructureSpec::None,
        }
    }

    pub fn materialize(&self) -> Mat {
        match self {
            Structured::Kron(k) => k.materialize(),
            Structured::Gs(g) => g.materialize(),
            Structured::BlockZero(b) => b.materialize(),
            Structured::Dense(m) => m.clone(),
        }
    }

    /// `X * materialize()` computed from the factors.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        match self {
            Structured::Kron(k) => k.apply(x),
            Structured::Gs(g) => g.apply(x),
            Structured::BlockZero(b) => b.apply(x),
            Structured::Dense(m) => {
                if x.ncols() != m.nrows() {
                    return Err(shape_err("apply: dense input width mismatch"));
                }
                Ok(x * m)
            }
        }
    }

    /// Stored scalars. Permutations are index metadata and not counted.
    pub fn param_count(&self) -> usize {
        let (rows, cols) = self.shape();
        self.spec().param_count(rows, cols)
    }

    /// `1 - params / (rows * cols)` relative to a dense matrix of the same
    /// size.
    pub fn compression_ratio(&self) -> f64 {
        let (rows, cols) = self.shape();
        compression_ratio(self.param_count(), rows, cols)
    }

    pub fn transposed(&self) -> Self {
        match self {
            Structured::Kron(k) => Structured::Kron(k.transposed()),
            Structured::Gs(g) => Structured::Gs(g.transposed()),
            Structured::BlockZero(b) => Structured::BlockZero(b.transposed()),
            Structured::Dense(m) => Structured::Dense(m.transpose()),
        }
    }

    pub fn is_finite(&self) -> bool {
        let mats: Vec<&Mat> = match self {
            Structured::Kron(k) => k.a.iter().chain(&k.b).collect(),
            Structured::Gs(g) => g.l.iter().chain(&g.r).collect(),
            Structured::BlockZero(b) => vec![&b.core],
            Structured::Dense(m) => vec![m],
        };
        mats.iter().all(|m| crate::linalg::is_finite(m))
    }
}

pub fn compression_ratio(params: usize, rows: usize, cols: usize) -> f64 {
    1.0 - params as f64 / (rows * cols) as f64
}

/// Frobenius-norm projection of `w` onto the class selected by `spec`.
pub fn project(w: &Mat, spec: &StructureSpec) -> Result<Structured> {
    Ok(match spec {
        StructureSpec::Kron(s) => Structured::Kron(kron_project(w, *s)?),
        StructureSpec::Gs(s) => Structured::Gs(gs_project(w, s)?),
        StructureSpec::Blockzero(s) => Structured::BlockZero(blockzero_project(w, *s)?),
        StructureSpec::None => Structured::Dense(w.clone()),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    rows: usize,
    cols: usize,
    spec: StructureSpec,
}

const MANIFEST: &str = "structure.json";

fn write_if_nonempty(path: &Path, t: Tensor) -> Result<()> {
    if !t.data().is_empty() {
        write_tensor(path, &t)?;
    }
    Ok(())
}

fn read_stack_or_zeros(path: &Path, count: usize, rows: usize, cols: usize) -> Result<Vec<Mat>> {
    if count * rows * cols == 0 {
        return Ok(vec![Mat::zeros(rows, cols); count]);
    }
    let stack = read_tensor(path)?.to_stack()?;
    if stack.len() != count || stack.iter().any(|m| m.shape() != (rows, cols)) {
        return Err(Error::InvalidTensor(format!("{} does not match its manifest", path.display())));
    }
    Ok(stack)
}

/// Writes a structured value as a directory holding `structure.json` and
/// one tensor file per factor stack.
pub fn save_structured(dir: &Path, s: &Structured) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (rows, cols) = s.shape();
    let manifest = Manifest { rows, cols, spec: s.spec() };
    match s {
        Structured::Kron(k) => {
            write_if_nonempty(&dir.join("a.pkt"), Tensor::from_stack(&k.a)?)?;
            write_if_nonempty(&dir.join("b.pkt"), Tensor::from_stack(&k.b)?)?;
        }
        Structured::Gs(g) => {
            write_if_nonempty(&dir.join("l.pkt"), Tensor::from_stack(&g.l)?)?;
            write_if_nonempty(&dir.join("r.pkt"), Tensor::from_stack(&g.r)?)?;
        }
        Structured::BlockZero(b) => {
            write_if_nonempty(&dir.join("core.pkt"), Tensor::from_matrix(&b.core))?;
        }
        Structured::Dense(m) => {
            write_if_nonempty(&dir.join("w.pkt"), Tensor::from_matrix(m))?;
        }
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_structured(dir: &Path) -> Result<Structured> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let (rows, cols) = (manifest.rows, manifest.cols);
    manifest.spec.validate(rows, cols)?;
    Ok(match manifest.spec {
        StructureSpec::Kron(s) => {
            let a = read_stack_or_zeros(&dir.join("a.pkt"), s.rank, s.m1, s.n1)?;
            let b = read_stack_or_zeros(&dir.join("b.pkt"), s.rank, s.m2, s.n2)?;
            Structured::Kron(KroneckerSum { shape: s, a, b })
        }
        StructureSpec::Gs(s) => {
            let l = read_stack_or_zeros(&dir.join("l.pkt"), s.kl, s.bl1, s.bl2)?;
            let r = read_stack_or_zeros(&dir.join("r.pkt"), s.kr, s.br1, s.br2)?;
            Structured::Gs(GsMatrix::new(s, l, r)?)
        }
        StructureSpec::Blockzero(s) => {
            let (r, c) = s.core_shape(rows, cols);
            let core = if r * c == 0 {
                Mat::zeros(r, c)
            } else {
                read_tensor(dir.join("core.pkt"))?.to_matrix()?
            };
            Structured::BlockZero(BlockZero::new(rows, cols, s, core)?)
        }
        StructureSpec::None => {
            let m = if rows * cols == 0 {
                Mat::zeros(rows, cols)
            } else {
                read_tensor(dir.join("w.pkt"))?.to_matrix()?
            };
            if m.shape() != (rows, cols) {
                return Err(Error::InvalidTensor("dense weight does not match its manifest".into()));
            }
            Structured::Dense(m)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_normal;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<(usize, usize, StructureSpec)> {
        vec![
            (6, 8, StructureSpec::Kron(KronShape { rank: 2, m1: 2, n1: 2, m2: 3, n2: 4 })),
            (8, 8, StructureSpec::Gs(GsShape::new(2, 2, 4, 4, 4, 4))),
            (6, 4, StructureSpec::Blockzero(BlockZeroShape { d: 2, pattern: ZeroPattern::ZeroRows })),
            (3, 5, StructureSpec::None),
        ]
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        for (_, _, s) in specs() {
            let js = serde_json::to_string(&s).unwrap();
            let back: StructureSpec = serde_json::from_str(&js).unwrap();
            assert_eq!(back, s);
        }
        let bad = r#"{"kind":"kron","rank":1,"m1":1,"n1":1,"m2":1,"n2":1,"extra":3}"#;
        assert!(serde_json::from_str::<StructureSpec>(bad).is_err());
    }

    #[test]
    fn projection_is_idempotent() {
        let mut g = ChaCha8Rng::seed_from_u64(11);
        for (r, c, s) in specs() {
            let w = random_normal(r, c, &mut g);
            let p1 = project(&w, &s).unwrap().materialize();
            let p2 = project(&p1, &s).unwrap();
            let err = (p2.materialize() - &p1).norm();
            assert!(err < 1e-10 * (1.0 + p1.norm()), "{:?}: {}", s, err);
            assert_eq!(p2.param_count(), s.param_count(r, c));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = ChaCha8Rng::seed_from_u64(12);
        for (k, (r, c, s)) in specs().into_iter().enumerate() {
            let w = random_normal(r, c, &mut g);
            let p = project(&w, &s).unwrap();
            let sub = dir.path().join(format!("s{}", k));
            save_structured(&sub, &p).unwrap();
            let back = load_structured(&sub).unwrap();
            assert_eq!(back.materialize(), p.materialize());
        }
        // empty core
        let p = project(&Mat::zeros(3, 3), &StructureSpec::Blockzero(BlockZeroShape { d: 0, pattern: ZeroPattern::ZeroCols })).unwrap();
        let sub = dir.path().join("empty");
        save_structured(&sub, &p).unwrap();
        assert_eq!(load_structured(&sub).unwrap().materialize(), Mat::zeros(3, 3));
    }

    #[test]
    fn appendix_sizing_examples() {
        // q = 4, r = 3 on a 64x64 matrix: 3 * (4 + 16 * 64) parameters
        let k = KronShape { rank: 3, m1: 4, n1: 1, m2: 16, n2: 64 };
        assert_eq!(k.param_count(), 3 * (4 + 16 * 64));
        let ratio = compression_ratio(k.param_count(), 64, 64);
        assert!((ratio - 0.25).abs() < 0.01);
        // kl, kr = 4, 2 on a square 64x64 matrix at 3/4 kept parameters
        let gs = GsShape::new(4, 2, 16, 16, 32, 32);
        gs.validate(64, 64).unwrap();
        assert!((gs.param_fraction() - 0.75).abs() < 1e-15);
        // block-zero keeping every column compresses nothing
        let bz = BlockZeroShape { d: 64, pattern: ZeroPattern::ZeroCols };
        assert_eq!(compression_ratio(bz.param_count(64, 64), 64, 64), 0.0);
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
        (1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..5, any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kron_apply_matches_materialize((m1, n1, m2, n2, rows, seed) in arb_case()) {
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let rank = 1 + (seed as usize % (m1 * n1).min(m2 * n2));
            let a = (0..rank).map(|_| random_normal(m1, n1, &mut g)).collect();
            let b = (0..rank).map(|_| random_normal(m2, n2, &mut g)).collect();
            let s = Structured::Kron(KroneckerSum::new(a, b).unwrap());
            let x = random_normal(rows, m1 * m2, &mut g);
            let dense = &x * s.materialize();
            prop_assert!((s.apply(&x).unwrap() - &dense).norm() <= 1e-12 * dense.norm().max(1e-300));
        }

        #[test]
        fn gs_apply_matches_materialize((kl, kr, bl1, br2, rows, seed) in arb_case()) {
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let inner = kl * kr * (1 + seed as usize % 2);
            let shape = GsShape::new(kl, kr, bl1, inner / kl, inner / kr, br2);
            let l = (0..kl).map(|_| random_normal(bl1, inner / kl, &mut g)).collect();
            let r = (0..kr).map(|_| random_normal(inner / kr, br2, &mut g)).collect();
            let s = Structured::Gs(GsMatrix::new(shape, l, r).unwrap());
            let x = random_normal(rows, kl * bl1, &mut g);
            let dense = &x * s.materialize();
            prop_assert!((s.apply(&x).unwrap() - &dense).norm() <= 1e-12 * dense.norm().max(1e-300));
        }

        #[test]
        fn rearrangement_is_an_isometry((m1, n1, m2, n2, _r, seed) in arb_case()) {
            let w = random_normal(m1 * m2, n1 * n2, &mut ChaCha8Rng::seed_from_u64(seed));
            let r = rearrange_kron(&w, m1, n1, m2, n2).unwrap();
            prop_assert!((r.norm() - w.norm()).abs() <= 1e-14 * w.norm());
        }
    }
}
