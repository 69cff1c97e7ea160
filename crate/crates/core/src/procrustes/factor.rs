use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cayley, cayley_inverse, fix_spectrum, skew_from_upper, skew_to_upper, SpectrumLog};
use crate::error::{Error, Result};
use crate::linalg::{orthogonality_error, Mat};
use crate::tensorfile::{read_matrix, read_tensor, write_matrix, write_tensor, Tensor};

/// An orthogonal matrix, stored densely or as the strict upper triangle of
/// a skew matrix `K` with `Q = restore(cayley(K))`.
#[derive(Debug, Clone, PartialEq)]
pub enum OrthogonalFactor {
    Dense(Mat),
    Skew {
        n: usize,
        upper: Vec<f64>,
        fixes: SpectrumLog,
    },
}

impl OrthogonalFactor {
    pub fn dense(q: Mat) -> Result<Self> {
        let err = orthogonality_error(&q);
        if !q.is_square() || !(err < 1e-10) {
            return Err(Error::NotOrthogonal(err));
        }
        Ok(OrthogonalFactor::Dense(q))
    }

    /// Compresses a dense orthogonal matrix to its skew parameter, applying
    /// spectrum fixes first so that the Cayley inverse exists.
    pub fn skew_from_dense(q: &Mat) -> Result<Self> {
        let err = orthogonality_error(q);
        if !q.is_square() || !(err < 1e-8) {
            return Err(Error::NotOrthogonal(err));
        }
        let (fixed, fixes) = fix_spectrum(q);
        let k = cayley_inverse(&fixed)?;
        Ok(OrthogonalFactor::Skew {
            n: q.nrows(),
            upper: skew_to_upper(&k),
            fixes,
        })
    }

    pub fn order(&self) -> usize {
        match self {
            OrthogonalFactor::Dense(q) => q.nrows(),
            OrthogonalFactor::Skew { n, .. } => *n,
        }
    }

    pub fn to_dense(&self) -> Result<Mat> {
        match self {
            OrthogonalFactor::Dense(q) => Ok(q.clone()),
            OrthogonalFactor::Skew { n, upper, fixes } => {
                let q = cayley(&skew_from_upper(*n, upper)?)?;
                Ok(fixes.restore(&q))
            }
        }
    }

    /// Stored scalars: `n^2` dense, `n(n-1)/2` skew. Reflection vectors in
    /// the fix log are bookkeeping and are not counted.
    pub fn param_count(&self) -> usize {
        match self {
            OrthogonalFactor::Dense(q) => q.len(),
            OrthogonalFactor::Skew { upper, .. } => upper.len(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorNote {
    form: String,
    n: usize,
    fixes: SpectrumLog,
}

/// Writes `factor.json` and either `k.pkt` (skew upper triangle) or `q.pkt`
/// into `dir`.
pub fn save_factor(dir: &Path, f: &OrthogonalFactor) -> Result<()> {
    fs::create_dir_all(dir)?;
    let note = match f {
        OrthogonalFactor::Dense(q) => {
            write_matrix(&dir.join("q.pkt"), q)?;
            FactorNote { form: "dense".into(), n: q.nrows(), fixes: SpectrumLog::default() }
        }
        OrthogonalFactor::Skew { n, upper, fixes } => {
            if !upper.is_empty() {
                write_tensor(&dir.join("k.pkt"), &Tensor::from_vec(upper))?;
            }
            FactorNote { form: "skew".into(), n: *n, fixes: fixes.clone() }
        }
    };
    fs::write(dir.join("factor.json"), serde_json::to_vec_pretty(&note)?)?;
    Ok(())
}

pub fn load_factor(dir: &Path) -> Result<OrthogonalFactor> {
    let note: FactorNote = serde_json::from_slice(&fs::read(dir.join("factor.json"))?)?;
    match note.form.as_str() {
        "dense" => {
            let q = read_matrix(&dir.join("q.pkt"))?;
            if q.shape() != (note.n, note.n) {
                return Err(Error::InvalidTensor("dense factor has the wrong order".into()));
            }
            Ok(OrthogonalFactor::Dense(q))
        }
        "skew" => {
            let upper = if note.n > 1 {
                read_tensor(&dir.join("k.pkt"))?.data().to_vec()
            } else {
                Vec::new()
            };
            skew_from_upper(note.n, &upper)?;
            Ok(OrthogonalFactor::Skew { n: note.n, upper, fixes: note.fixes })
        }
        other => Err(Error::InvalidTensor(format!("unknown factor form {:?}", other))),
    }
}
