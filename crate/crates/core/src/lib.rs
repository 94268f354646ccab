//! Certified reduced-order models for the Aliev-Panfilov monodomain
//! equations: finite element assembly, an IMEX full-order solver, POD-DEIM
//! Galerkin reduction, a primal-dual output error estimator and adaptive
//! greedy construction of the reduced basis.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod fom;
pub mod geometry;
pub mod greedy;
pub mod linalg;
pub mod mtx;
pub mod pod;
pub mod rbf;
pub mod reaction;
pub mod rom;

pub use error::{Error, Result};
