//! Second-order finite differences on uniform grids.
//!
//! Central differences in the interior, second-order one-sided differences on
//! the box faces. Mixed second derivatives are tensor products of the first
//! derivative stencils, so every stencil here is exact on quadratics.

use rayon::prelude::*;

use super::fields::{packed_len, ScalarField, SymMatField, VectorField};
use super::grid::Grid;

#[derive(Clone, Copy, Debug)]
struct Stencil {
    offsets: [isize; 4],
    weights: [f64; 4],
    len: usize,
}

impl Stencil {
    fn iter(&self) -> impl Iterator<Item = (isize, f64)> + '_ {
        self.offsets[..self.len]
            .iter()
            .copied()
            .zip(self.weights[..self.len].iter().copied())
    }
}

/// First derivative weights (to be divided by `h`).
fn first(i: usize, m: usize) -> Stencil {
    if i == 0 {
        Stencil {
            offsets: [0, 1, 2, 0],
            weights: [-1.5, 2.0, -0.5, 0.0],
            len: 3,
        }
    } else if i == m - 1 {
        Stencil {
            offsets: [0, -1, -2, 0],
            weights: [1.5, -2.0, 0.5, 0.0],
            len: 3,
        }
    } else {
        Stencil {
            offsets: [-1, 1, 0, 0],
            weights: [-0.5, 0.5, 0.0, 0.0],
            len: 2,
        }
    }
}

/// Second derivative weights (to be divided by `h^2`).
fn second(i: usize, m: usize) -> Stencil {
    if i == 0 {
        Stencil {
            offsets: [0, 1, 2, 3],
            weights: [2.0, -5.0, 4.0, -1.0],
            len: 4,
        }
    } else if i == m - 1 {
        Stencil {
            offsets: [0, -1, -2, -3],
            weights: [2.0, -5.0, 4.0, -1.0],
            len: 4,
        }
    } else {
        Stencil {
            offsets: [-1, 0, 1, 0],
            weights: [1.0, -2.0, 1.0, 0.0],
            len: 3,
        }
    }
}

#[inline]
fn shift(node: usize, offset: isize, stride: usize) -> usize {
    (node as isize + offset * stride as isize) as usize
}

fn multi(grid: &Grid, node: usize) -> [usize; 8] {
    let mut idx = [0usize; 8];
    grid.multi_index(node, &mut idx[..grid.dim()]);
    idx
}

/// Gradient `Du` at every node.
pub fn fd_gradient(u: &ScalarField) -> VectorField {
    let grid = u.grid();
    let n = grid.dim();
    assert!(n <= 8, "grids above 8 dimensions are not supported");
    let h = grid.spacing();
    let vals = u.values();
    let mut out = vec![0.0; grid.len() * n];
    out.par_chunks_mut(n).enumerate().for_each(|(node, g)| {
        let idx = multi(grid, node);
        for a in 0..n {
            let st = first(idx[a], grid.shape()[a]);
            let stride = grid.strides()[a];
            g[a] = st
                .iter()
                .map(|(o, w)| w * vals[shift(node, o, stride)])
                .sum::<f64>()
                / h;
        }
    });
    VectorField::from_raw(grid.clone(), out)
}

/// Hessian `D^2u` at every node, symmetric by construction.
pub fn fd_hessian(u: &ScalarField) -> SymMatField {
    let grid = u.grid();
    let n = grid.dim();
    assert!(n <= 8, "grids above 8 dimensions are not supported");
    let h2 = grid.spacing() * grid.spacing();
    let vals = u.values();
    let p = packed_len(n);
    let mut out = vec![0.0; grid.len() * p];
    out.par_chunks_mut(p).enumerate().for_each(|(node, hess)| {
        let idx = multi(grid, node);
        let mut k = 0;
        for a in 0..n {
            let sa = grid.strides()[a];
            for b in a..n {
                hess[k] = if a == b {
                    second(idx[a], grid.shape()[a])
                        .iter()
                        .map(|(o, w)| w * vals[shift(node, o, sa)])
                        .sum::<f64>()
                } else {
                    let sb = grid.strides()[b];
                    let fa = first(idx[a], grid.shape()[a]);
                    let fb = first(idx[b], grid.shape()[b]);
                    let mut acc = 0.0;
                    for (oa, wa) in fa.iter() {
                        let base = shift(node, oa, sa);
                        for (ob, wb) in fb.iter() {
                            acc += wa * wb * vals[shift(base, ob, sb)];
                        }
                    }
                    acc
                } / h2;
                k += 1;
            }
        }
    });
    SymMatField::from_raw(grid.clone(), out)
}

/// Laplacian `Δu` at every node (trace of [`fd_hessian`] without the mixed terms).
pub fn fd_laplacian(u: &ScalarField) -> ScalarField {
    let grid = u.grid();
    let n = grid.dim();
    let h2 = grid.spacing() * grid.spacing();
    let vals = u.values();
    let mut out = vec![0.0; grid.len()];
    out.par_iter_mut().enumerate().for_each(|(node, lap)| {
        let idx = multi(grid, node);
        *lap = (0..n)
            .map(|a| {
                let sa = grid.strides()[a];
                second(idx[a], grid.shape()[a])
                    .iter()
                    .map(|(o, w)| w * vals[shift(node, o, sa)])
                    .sum::<f64>()
            })
            .sum::<f64>()
            / h2;
    });
    ScalarField::new(grid.clone(), out).expect("finite input gives finite Laplacian")
}
