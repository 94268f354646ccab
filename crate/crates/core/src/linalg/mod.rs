//! Sparse and dense linear algebra used across the crate.

mod cholesky;
mod dense;
mod sparse;

pub use cholesky::{reverse_cuthill_mckee, SparseCholesky};
pub use dense::{
    dot, orthonormal_extend, orthonormality_defect, orthonormalize, thin_svd, thin_svd_leading, upper_mul_pair,
    ThinSvd, DEPENDENCE_TOL,
};
pub use sparse::CsrMatrix;
