//! Grids, fields, finite differences, quadrature and masks.

mod analytic;
mod fields;
mod grid;
pub mod io;
mod ops;
mod region;
mod stencil;

pub use analytic::{AnalyticField, Derivatives, Provenance};
pub use fields::{pack, packed_index, packed_len, unpack, ScalarField, SymMatField, VectorField};
pub use grid::{Grid, MIN_NODES_PER_AXIS};
pub use ops::{integrate, lipschitz_norm, masked_extrema, node_weight, Integral, LipschitzNorm};
pub use region::{connected_component, RegionMask};
pub use stencil::{fd_gradient, fd_hessian, fd_laplacian};
