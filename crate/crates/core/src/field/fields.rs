use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::grid::Grid;
use crate::error::{Error, Result};

/// Number of stored entries of a packed symmetric `n x n` matrix.
#[inline]
pub const fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)` in the packed upper triangle (row-major).
#[inline]
pub fn packed_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * (2 * n + 1 - i) / 2 + (j - i)
}

/// Expands a packed upper triangle into a dense symmetric matrix.
pub fn unpack(n: usize, packed: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = packed[k];
            m[(j, i)] = packed[k];
            k += 1;
        }
    }
    m
}

/// Packs the upper triangle of `m` (assumed symmetric).
pub fn pack(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(p) => Err(Error::Hypothesis(format!(
            "non-finite value {} at storage offset {p}",
            values[p]
        ))),
    }
}

/// One real value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        ScalarField {
            values: vec![c; grid.len()],
            grid: grid.clone(),
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn<F>(grid: &Grid, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let dim = grid.dim();
        let values = (0..grid.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; dim],
                |x, node| {
                    grid.coords(node, x);
                    f(x)
                },
            )
            .collect();
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, node: usize) -> f64 {
        self.values[node]
    }

    /// Value at the origin node.
    pub fn at_origin(&self) -> f64 {
        self.values[self.grid.origin_node()]
    }

    /// Applies `f` node-wise.
    pub fn map<F>(&self, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Sync,
    {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.par_iter().map(|&v| f(v)).collect(),
        }
    }

    /// Combines two fields on the same grid node-wise.
    pub fn zip_map<F>(&self, other: &ScalarField, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Sync,
    {
        self.grid.ensure_same(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .par_iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Multilinear interpolation at an arbitrary point; `None` outside the box.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        let g = &self.grid;
        let dim = g.dim();
        let h = g.spacing();
        let mut base = 0usize;
        let mut frac = [0.0f64; 16];
        let mut step = [0usize; 16];
        if dim > 16 {
            return None;
        }
        let origin = g.origin();
        for axis in 0..dim {
            let t = (x[axis] - origin[axis]) / h;
            let m = g.shape()[axis];
            if !(t >= -1e-12 && t <= (m - 1) as f64 + 1e-12) {
                return None;
            }
            let i = (t.floor().max(0.0) as usize).min(m - 2);
            frac[axis] = (t - i as f64).clamp(0.0, 1.0);
            base += i * g.strides()[axis];
            step[axis] = g.strides()[axis];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut node = base;
            for axis in 0..dim {
                if corner >> axis & 1 == 1 {
                    w *= frac[axis];
                    node += step[axis];
                } else {
                    w *= 1.0 - frac[axis];
                }
            }
            if w != 0.0 {
                acc += w * self.values[node];
            }
        }
        Some(acc)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Injection onto the spacing-`2h` grid of nodes whose offset from the origin is even.
    pub fn restrict(&self) -> Result<Self> {
        let g = &self.grid;
        let n = g.dim();
        let origin_multi = {
            let mut m = vec![0; n];
            g.multi_index(g.origin_node(), &mut m);
            m
        };
        let starts: Vec<usize> = origin_multi.iter().map(|c| c % 2).collect();
        let shape: Vec<usize> = (0..n).map(|a| (g.shape()[a] - 1 - starts[a]) / 2 + 1).collect();
        let origin: Vec<f64> = (0..n).map(|a| g.axis_coord(a, starts[a])).collect();
        let coarse = Grid::new(shape, 2.0 * g.spacing(), origin)?;
        let mut multi = vec![0; n];
        let values = (0..coarse.len())
            .map(|node| {
                coarse.multi_index(node, &mut multi);
                for (m, s) in multi.iter_mut().zip(&starts) {
                    *m = 2 * *m + s;
                }
                self.values[g.linear_index(&multi)]
            })
            .collect();
        ScalarField::new(coarse, values)
    }
}

/// Per-node real vector of length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    values: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * grid.dim();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(VectorField { grid, values })
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len() * grid.dim());
        VectorField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, node: usize) -> &[f64] {
        let n = self.grid.dim();
        &self.values[node * n..(node + 1) * n]
    }

    pub fn vector_at(&self, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.at(node))
    }

    /// Euclidean norm at every node.
    pub fn norms(&self) -> ScalarField {
        let n = self.grid.dim();
        let values = self
            .values
            .par_chunks(n)
            .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
            .collect();
        ScalarField {
            grid: self.grid.clone(),
            values,
        }
    }
}

/// Per-node symmetric `n x n` matrix stored as its packed upper triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatField {
    grid: Grid,
    values: Vec<f64>,
}

impl SymMatField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * packed_len(grid.dim());
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(SymMatField { grid, values })
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len() * packed_len(grid.dim()));
        SymMatField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, node: usize) -> &[f64] {
        let p = packed_len(self.grid.dim());
        &self.values[node * p..(node + 1) * p]
    }

    #[inline]
    pub fn entry(&self, node: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.dim();
        self.at(node)[packed_index(n, i, j)]
    }

    pub fn matrix_at(&self, node: usize) -> DMatrix<f64> {
        unpack(self.grid.dim(), self.at(node))
    }

    #[inline]
    pub fn trace_at(&self, node: usize) -> f64 {
        let n = self.grid.dim();
        let m = self.at(node);
        let mut k = 0;
        let mut tr = 0.0;
        for i in 0..n {
            tr += m[k];
            k += n - i;
        }
        tr
    }

    /// Trace at every node.
    pub fn trace(&self) -> ScalarField {
        let n = self.grid.dim();
        let diag: Vec<usize> = (0..n).map(|i| packed_index(n, i, i)).collect();
        let values = self
            .values
            .par_chunks(packed_len(n))
            .map(|m| diag.iter().map(|&d| m[d]).sum())
            .collect();
        ScalarField {
            grid: self.grid.clone(),
            values,
        }
    }

    /// Builds a field node by node from dense matrices.
    pub fn from_fn<F>(grid: &Grid, f: F) -> Self
    where
        F: Fn(usize) -> DMatrix<f64> + Sync,
    {
        let p = packed_len(grid.dim());
        let mut values = vec![0.0; grid.len() * p];
        values
            .par_chunks_mut(p)
            .enumerate()
            .for_each(|(node, out)| pack(&f(node), out));
        SymMatField {
            grid: grid.clone(),
            values,
        }
    }
}
