use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fields::{packed_len, ScalarField, SymMatField, VectorField};
use super::grid::Grid;
use super::stencil::{fd_gradient, fd_hessian};

/// Where derivative data came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FiniteDifference,
    Analytic,
}

/// A smooth function with closed-form first and second derivatives.
pub trait AnalyticField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Packed upper triangle of the Hessian.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// Value, gradient and Hessian of one scalar function on a grid.
#[derive(Clone, Debug)]
pub struct Derivatives {
    pub value: ScalarField,
    pub gradient: VectorField,
    pub hessian: SymMatField,
    pub provenance: Provenance,
}

impl Derivatives {
    pub fn from_fd(u: &ScalarField) -> Self {
        Derivatives {
            gradient: fd_gradient(u),
            hessian: fd_hessian(u),
            value: u.clone(),
            provenance: Provenance::FiniteDifference,
        }
    }

    pub fn from_analytic<A: AnalyticField + ?Sized>(grid: &Grid, a: &A) -> Self {
        assert_eq!(a.dim(), grid.dim(), "analytic field dimension");
        let n = grid.dim();
        let p = packed_len(n);
        let value = ScalarField::from_fn(grid, |x| a.value(x));
        let mut g = vec![0.0; grid.len() * n];
        g.par_chunks_mut(n).enumerate().for_each(|(node, out)| {
            let x = grid.coords_vec(node);
            a.gradient(&x, out);
        });
        let mut h = vec![0.0; grid.len() * p];
        h.par_chunks_mut(p).enumerate().for_each(|(node, out)| {
            let x = grid.coords_vec(node);
            a.hessian(&x, out);
        });
        Derivatives {
            value,
            gradient: VectorField::from_raw(grid.clone(), g),
            hessian: SymMatField::from_raw(grid.clone(), h),
            provenance: Provenance::Analytic,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.value.grid()
    }
}
