//! Calibration statistics: batched accumulation of `X^T X`, its symmetric
//! square root, and the token-frequency diagonal used for the embedding
//! and head problems.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{is_finite, sym_eigen, Mat, Vector};
use crate::par::{self, Exec};
use crate::tensorfile::read_matrix;

/// Running sum `S = sum_i X_i^T X_i` over row batches of width `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationAccumulator {
    sum: Mat,
    rows: usize,
}

impl CorrelationAccumulator {
    pub fn new(n: usize) -> Self {
        Self { sum: Mat::zeros(n, n), rows: 0 }
    }

    /// Resumes from a stored sum over `rows` rows.
    pub fn from_sum(sum: Mat, rows: usize) -> Result<Self> {
        if !sum.is_square() {
            return Err(shape_err("correlation sum must be square"));
        }
        if !is_finite(&sum) {
            return Err(Error::NonFinite("correlation sum"));
        }
        Ok(Self { sum, rows })
    }

    pub fn dim(&self) -> usize {
        self.sum.nrows()
    }

    /// Number of rows accumulated so far.
    pub fn count(&self) -> usize {
        self.rows
    }

    pub fn sum(&self) -> &Mat {
        &self.sum
    }

    pub fn into_sum(self) -> Mat {
        self.sum
    }

    pub fn accumulate(&mut self, batch: &Mat) -> Result<()> {
        if batch.ncols() != self.dim() {
            return Err(shape_err(format!(
                "batch width {} does not match accumulator dimension {}",
                batch.ncols(),
                self.dim()
            )));
        }
        if !is_finite(batch) {
            return Err(Error::NonFinite("calibration batch"));
        }
        self.sum.gemm_tr(1.0, batch, batch, 1.0);
        self.rows += batch.nrows();
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(shape_err("cannot merge accumulators of different dimension"));
        }
        self.sum += &other.sum;
        self.rows += other.rows;
        Ok(())
    }

    /// Accumulates `batches` with one partial sum per batch, merged in
    /// batch order, so the result does not depend on the thread count.
    pub fn from_batches(n: usize, batches: &[Mat], exec: Exec) -> Result<Self> {
        let parts = par::map(exec, batches, |_, b| {
            let mut acc = Self::new(n);
            acc.accumulate(b).map(|_| acc)
        });
        let mut total = Self::new(n);
        for p in parts {
            total.merge(&p?)?;
        }
        Ok(total)
    }
}

/// Symmetric PSD square root of a correlation matrix. Eigenvalues in
/// `[-1e-10 ||S||_F, 0)` are clamped to zero; anything lower is an error.
pub fn correlation_root(s: &Mat) -> Result<Mat> {
    if !s.is_square() {
        return Err(shape_err("correlation matrix must be square"));
    }
    if !is_finite(s) {
        return Err(Error::NonFinite("correlation matrix"));
    }
    let n = s.nrows();
    let sym = (s + s.transpose()) * 0.5;
    let (vals, vecs) = sym_eigen(&sym);
    let tol = 1e-10 * s.norm();
    let mut roots = Vector::zeros(n);
    for (i, &l) in vals.iter().enumerate() {
        if l < -tol {
            return Err(Error::NotPsd(l));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let r = &vecs * Mat::from_diagonal(&roots) * vecs.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// Token histogram over a vocabulary of size `vocab`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFrequency {
    pub counts: Vec<u64>,
}

impl TokenFrequency {
    pub fn vocab(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn count_tokens(ids: &[usize], vocab: usize) -> Result<TokenFrequency> {
    let mut counts = vec![0u64; vocab];
    for &id in ids {
        *counts.get_mut(id).ok_or(Error::IdOutOfRange { id, vocab })? += 1;
    }
    Ok(TokenFrequency { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EmbeddingWeighting {
    #[default]
    #[serde(rename = "sqrtD1")]
    SqrtD1,
    #[serde(rename = "logD1")]
    LogD1,
    #[serde(rename = "none")]
    None,
}

/// Diagonal weight per token: `sqrt(D + 1)`, `ln(D + 1)` or one.
pub fn embedding_weight(freq: &TokenFrequency, mode: EmbeddingWeighting) -> Vec<f64> {
    freq.counts
        .iter()
        .map(|&d| match mode {
            EmbeddingWeighting::SqrtD1 => (d as f64 + 1.0).sqrt(),
            EmbeddingWeighting::LogD1 => (d as f64 + 1.0).ln(),
            EmbeddingWeighting::None => 1.0,
        })
        .collect()
}

/// Reads every `*.pkt` matrix in `dir`, sorted by file name.
pub fn read_batches(dir: &Path) -> Result<Vec<Mat>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pkt"))
        .collect();
    paths.sort();
    paths.iter().map(read_matrix).collect()
}

/// Parses a newline-delimited list of token ids; blank lines are skipped.
pub fn read_token_stream(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<usize>()
                .map_err(|e| Error::InvalidConfig(format!("bad token id {:?}: {}", l, e)))
        })
        .collect()
}
