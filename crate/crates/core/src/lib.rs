//! Finite-difference laboratory for the σ₂ Hessian equation `σ₂(D²u) = f` and the
//! prescribed scalar-curvature equation `σ₂(κ) = f` for graphs.
//!
//! Modules mirror the pipeline: grid fields, pointwise σ₂ algebra, graph
//! geometry, Jacobi residuals, barriers, integral (Moser) machinery, a Newton
//! solver and the audit orchestration.

pub mod audit;
pub mod barrier;
pub mod error;
pub mod field;
pub mod geometry;
pub mod jacobi;
pub mod moser;
pub mod sigma2;
pub mod solver;

pub use error::{Error, Result};
