use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum nodes per axis: leaves room for two-wide one-sided stencils at each face.
pub const MIN_NODES_PER_AXIS: usize = 5;

/// Uniform isotropic node grid over a box that contains the origin as a node.
///
/// Node coordinates are computed as `(i - center) * h`, so the origin node and
/// every coordinate that is an integer multiple of `h` is represented exactly.
/// Values are stored row-major: the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    shape: Vec<usize>,
    spacing: f64,
    center: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GridSpec {
    shape: Vec<usize>,
    spacing: f64,
    origin: Vec<f64>,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        Grid::new(spec.shape, spec.spacing, spec.origin)
    }
}

impl From<Grid> for GridSpec {
    fn from(grid: Grid) -> Self {
        GridSpec {
            origin: grid.origin(),
            shape: grid.shape,
            spacing: grid.spacing,
        }
    }
}

impl Grid {
    /// Builds a grid from its shape, spacing and the coordinates of node 0.
    ///
    /// The origin must place `x = 0` on a node (to within `1e-9 h`).
    pub fn new(shape: Vec<usize>, spacing: f64, origin: Vec<f64>) -> Result<Self> {
        let dim = shape.len();
        if dim < 2 {
            return Err(Error::InvalidGrid(format!("dimension {dim} < 2")));
        }
        if origin.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "origin has {} entries for a {dim}-dimensional shape",
                origin.len()
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidGrid(format!("spacing {spacing} is not positive")));
        }
        let mut center = Vec::with_capacity(dim);
        for (axis, (&m, &o)) in shape.iter().zip(&origin).enumerate() {
            if m < MIN_NODES_PER_AXIS {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis} has {m} nodes, need at least {MIN_NODES_PER_AXIS}"
                )));
            }
            let c = -o / spacing;
            let ci = c.round();
            if (c - ci).abs() > 1e-9 || ci < 0.0 || ci as usize >= m {
                return Err(Error::InvalidGrid(format!(
                    "origin {o} does not put x = 0 on a node of axis {axis}"
                )));
            }
            center.push(ci as usize);
        }
        let mut strides = vec![1; dim];
        for axis in (0..dim - 1).rev() {
            strides[axis] = strides[axis + 1] * shape[axis + 1];
        }
        let len = shape.iter().product();
        Ok(Grid {
            shape,
            spacing,
            center,
            strides,
            len,
        })
    }

    /// Cube `[-half_width, half_width]^dim` with spacing `h`; `half_width / h` must be an integer.
    pub fn cube(dim: usize, half_width: f64, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && half_width > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "half width {half_width} and spacing {spacing} must be positive"
            )));
        }
        let ratio = half_width / spacing;
        let half = ratio.round();
        if (ratio - half).abs() > 1e-9 {
            return Err(Error::InvalidGrid(format!(
                "half width {half_width} is not a multiple of spacing {spacing}"
            )));
        }
        let half = half as usize;
        Grid::new(
            vec![2 * half + 1; dim],
            spacing,
            vec![-(half as f64) * spacing; dim],
        )
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn origin(&self) -> Vec<f64> {
        self.center
            .iter()
            .map(|&c| -(c as f64) * self.spacing)
            .collect()
    }

    /// Linear index of the node at `x = 0`.
    pub fn origin_node(&self) -> usize {
        self.linear_index(&self.center)
    }

    /// Volume of one cell, `h^n`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim() as i32)
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, mut node: usize, out: &mut [usize]) {
        for (axis, &stride) in self.strides.iter().enumerate() {
            out[axis] = node / stride;
            node %= stride;
        }
    }

    /// Coordinate of node index `i` along `axis`.
    #[inline]
    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - self.center[axis] as f64) * self.spacing
    }

    pub fn coords(&self, node: usize, out: &mut [f64]) {
        let mut rest = node;
        for (axis, &stride) in self.strides.iter().enumerate() {
            let i = rest / stride;
            rest %= stride;
            out[axis] = self.axis_coord(axis, i);
        }
    }

    pub fn coords_vec(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.coords(node, &mut x);
        x
    }

    /// Node nearest to `x`, if `x` lies inside the box.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let mut node = 0;
        for axis in 0..self.dim() {
            let t = x[axis] / self.spacing + self.center[axis] as f64;
            let i = t.round();
            if i < 0.0 || i as usize >= self.shape[axis] {
                return None;
            }
            node += i as usize * self.strides[axis];
        }
        Some(node)
    }

    /// Number of node layers between `node` and the nearest box face (0 on a face).
    pub fn face_distance(&self, node: usize) -> usize {
        let mut rest = node;
        let mut best = usize::MAX;
        for (axis, &stride) in self.strides.iter().enumerate() {
            let i = rest / stride;
            rest %= stride;
            best = best.min(i).min(self.shape[axis] - 1 - i);
        }
        best
    }

    /// Largest radius `r` such that the closed ball `B_r(0)` lies inside the box.
    pub fn inscribed_radius(&self) -> f64 {
        (0..self.dim())
            .map(|a| {
                let lo = self.center[a] as f64;
                let hi = (self.shape[a] - 1 - self.center[a]) as f64;
                lo.min(hi) * self.spacing
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self == other
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_puts_origin_on_a_node() {
        let g = Grid::cube(3, 2.0, 1.0 / 16.0).unwrap();
        assert_eq!(g.shape(), &[65, 65, 65]);
        let x = g.coords_vec(g.origin_node());
        assert_eq!(x, vec![0.0, 0.0, 0.0]);
        assert_eq!(g.inscribed_radius(), 2.0);
    }

    #[test]
    fn rejects_small_or_offset_grids() {
        assert!(Grid::new(vec![4, 9], 0.1, vec![-0.2, -0.4]).is_err());
        assert!(Grid::new(vec![9, 9], 0.1, vec![-0.25, -0.4]).is_err());
        assert!(Grid::new(vec![9], 0.1, vec![-0.4]).is_err());
        assert!(Grid::cube(2, 1.0, 0.3).is_err());
    }

    #[test]
    fn index_round_trip() {
        let g = Grid::new(vec![5, 7, 6], 0.5, vec![-1.0, -1.5, -0.5]).unwrap();
        let mut m = [0; 3];
        for node in 0..g.len() {
            g.multi_index(node, &mut m);
            assert_eq!(g.linear_index(&m), node);
        }
        assert_eq!(g.face_distance(g.linear_index(&[2, 3, 2])), 2);
        assert_eq!(g.face_distance(g.linear_index(&[2, 3, 5])), 0);
    }

    #[test]
    fn serde_uses_origin() {
        let g = Grid::cube(2, 1.0, 0.25).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains("origin"));
        let back: Grid = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }
}
