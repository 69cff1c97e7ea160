//! Rotation-aided structured compression of weight-matrix pairs.
//!
//! Networks whose outputs are invariant under orthogonal changes of basis
//! of the residual stream can be rotated so that their weights become far
//! easier to approximate by low-parametric classes (sums of Kronecker
//! products, GS-matrices, block-zero slices). This crate finds those
//! rotations with alternating least squares coupling Procrustes solvers and
//! structured projections, first in the Frobenius norm and then in the norm
//! weighted by calibration activations.

pub mod als;
pub mod calib;
pub mod config;
pub mod error;
pub mod linalg;
pub mod par;
pub mod procrustes;
pub mod report;
pub mod structured;
pub mod tensorfile;
pub mod toymodel;
pub mod weighted;

pub use error::{Error, Result};
pub use linalg::Mat;
