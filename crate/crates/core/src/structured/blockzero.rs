//! Matrices with a single nonzero block anchored at the top-left corner.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroPattern {
    /// `[W 0]`: keep the first `d` columns.
    ZeroCols,
    /// `[W; 0]`: keep the first `d` rows.
    ZeroRows,
    /// `[[W 0]; [0 0]]`: keep the leading `d x d` block.
    Corner,
}

impl ZeroPattern {
    pub fn transposed(self) -> Self {
        match self {
            ZeroPattern::ZeroCols => ZeroPattern::ZeroRows,
            ZeroPattern::ZeroRows => ZeroPattern::ZeroCols,
            ZeroPattern::Corner => ZeroPattern::Corner,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockZeroShape {
    pub d: usize,
    pub pattern: ZeroPattern,
}

impl BlockZeroShape {
    pub fn core_shape(&self, rows: usize, cols: usize) -> (usize, usize) {
        match self.pattern {
            ZeroPattern::ZeroCols => (rows, self.d),
            ZeroPattern::ZeroRows => (self.d, cols),
            ZeroPattern::Corner => (self.d, self.d),
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let ok = match self.pattern {
            ZeroPattern::ZeroCols => self.d <= cols,
            ZeroPattern::ZeroRows => self.d <= rows,
            ZeroPattern::Corner => self.d <= rows && self.d <= cols,
        };
        if !ok {
            return Err(shape_err(format!(
                "kept dimension {} exceeds a {}x{} matrix for {:?}",
                self.d, rows, cols, self.pattern
            )));
        }
        Ok(())
    }

    pub fn param_count(&self, rows: usize, cols: usize) -> usize {
        let (r, c) = self.core_shape(rows, cols);
        r * c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockZero {
    pub rows: usize,
    pub cols: usize,
    pub shape: BlockZeroShape,
    pub core: Mat,
}

impl BlockZero {
    pub fn new(rows: usize, cols: usize, shape: BlockZeroShape, core: Mat) -> Result<Self> {
        shape.validate(rows, cols)?;
        if core.shape() != shape.core_shape(rows, cols) {
            return Err(shape_err("block-zero core has the wrong shape"));
        }
        Ok(Self { rows, cols, shape, core })
    }

    pub fn materialize(&self) -> Mat {
        let mut out = Mat::zeros(self.rows, self.cols);
        out.view_mut((0, 0), self.core.shape()).copy_from(&self.core);
        out
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.rows {
            return Err(shape_err("apply: block-zero input width mismatch"));
        }
        let (kr, kc) = self.core.shape();
        let mut out = Mat::zeros(x.nrows(), self.cols);
        if kr > 0 && kc > 0 {
            let blk = x.columns(0, kr) * &self.core;
            out.columns_mut(0, kc).copy_from(&blk);
        }
        Ok(out)
    }

    pub fn transposed(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            shape: BlockZeroShape {
                d: self.shape.d,
                pattern: self.shape.pattern.transposed(),
            },
            core: self.core.transpose(),
        }
    }
}

/// Copies the retained block and zeros the rest, the Frobenius-optimal
/// member of the class for the fixed pattern.
pub fn blockzero_project(w: &Mat, shape: BlockZeroShape) -> Result<BlockZero> {
    shape.validate(w.nrows(), w.ncols())?;
    let (r, c) = shape.core_shape(w.nrows(), w.ncols());
    let core = w.view((0, 0), (r, c)).into_owned();
    BlockZero::new(w.nrows(), w.ncols(), shape, core)
}
