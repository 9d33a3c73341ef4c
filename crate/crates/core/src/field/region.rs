use std::collections::VecDeque;

use super::fields::ScalarField;
use super::grid::Grid;
use crate::error::{Error, Result};

/// Boolean per node.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    grid: Grid,
    inside: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid: Grid, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: inside.len(),
            });
        }
        Ok(RegionMask { grid, inside })
    }

    pub fn full(grid: &Grid) -> Self {
        RegionMask {
            grid: grid.clone(),
            inside: vec![true; grid.len()],
        }
    }

    pub fn empty(grid: &Grid) -> Self {
        RegionMask {
            grid: grid.clone(),
            inside: vec![false; grid.len()],
        }
    }

    /// Nodes whose coordinates satisfy `pred`.
    pub fn from_predicate<F>(grid: &Grid, pred: F) -> Self
    where
        F: Fn(&[f64]) -> bool,
    {
        let mut x = vec![0.0; grid.dim()];
        let inside = (0..grid.len())
            .map(|node| {
                grid.coords(node, &mut x);
                pred(&x)
            })
            .collect();
        RegionMask {
            grid: grid.clone(),
            inside,
        }
    }

    /// Closed ball `|x| <= radius`.
    pub fn ball(grid: &Grid, radius: f64) -> Self {
        let r2 = radius * radius * (1.0 + 1e-12);
        Self::from_predicate(grid, |x| x.iter().map(|c| c * c).sum::<f64>() <= r2)
    }

    /// Nodes at least `layers` nodes away from every box face.
    pub fn interior(grid: &Grid, layers: usize) -> Self {
        let inside = (0..grid.len())
            .map(|node| grid.face_distance(node) >= layers)
            .collect();
        RegionMask {
            grid: grid.clone(),
            inside,
        }
    }

    /// Nodes where `field > threshold` (strict).
    pub fn above(field: &ScalarField, threshold: f64) -> Self {
        RegionMask {
            grid: field.grid().clone(),
            inside: field.values().iter().map(|&v| v > threshold).collect(),
        }
    }

    /// Nodes where `a < b` (strict).
    pub fn less_than(a: &ScalarField, b: &ScalarField) -> Result<Self> {
        a.grid().ensure_same(b.grid())?;
        Ok(RegionMask {
            grid: a.grid().clone(),
            inside: a
                .values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| x < y)
                .collect(),
        })
    }

    /// Reads a 0/1 scalar field.
    pub fn from_indicator(field: &ScalarField) -> Result<Self> {
        let mut inside = Vec::with_capacity(field.values().len());
        for &v in field.values() {
            inside.push(match v {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                v => {
                    return Err(Error::Format(format!(
                        "mask field must hold 0 or 1, found {v}"
                    )))
                }
            });
        }
        Ok(RegionMask {
            grid: field.grid().clone(),
            inside,
        })
    }

    pub fn to_indicator(&self) -> ScalarField {
        ScalarField::new(
            self.grid.clone(),
            self.inside.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("indicator values are finite")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn contains(&self, node: usize) -> bool {
        self.inside[node]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.inside
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.inside.iter().any(|&b| b)
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.inside
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn and(&self, other: &RegionMask) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Ok(RegionMask {
            grid: self.grid.clone(),
            inside: self
                .inside
                .iter()
                .zip(&other.inside)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn or(&self, other: &RegionMask) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Ok(RegionMask {
            grid: self.grid.clone(),
            inside: self
                .inside
                .iter()
                .zip(&other.inside)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.grid == other.grid && self.inside.iter().zip(&other.inside).all(|(a, b)| !a || *b)
    }
}

/// Face-adjacent flood fill of `mask` from `seed`.
pub fn connected_component(mask: &RegionMask, seed: usize) -> Result<RegionMask> {
    if seed >= mask.inside.len() || !mask.inside[seed] {
        return Err(Error::SeedOutsideMask(seed));
    }
    let grid = mask.grid();
    let dim = grid.dim();
    let mut idx = vec![0usize; dim];
    let mut seen = vec![false; grid.len()];
    let mut queue = VecDeque::new();
    seen[seed] = true;
    queue.push_back(seed);
    while let Some(node) = queue.pop_front() {
        grid.multi_index(node, &mut idx);
        for axis in 0..dim {
            let stride = grid.strides()[axis];
            if idx[axis] > 0 {
                let nb = node - stride;
                if mask.inside[nb] && !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
            if idx[axis] + 1 < grid.shape()[axis] {
                let nb = node + stride;
                if mask.inside[nb] && !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
    }
    Ok(RegionMask {
        grid: grid.clone(),
        inside: seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::cube(2, 1.0, 0.125).unwrap()
    }

    #[test]
    fn full_box_component_is_full_box() {
        let g = grid();
        let full = RegionMask::full(&g);
        let c = connected_component(&full, g.origin_node()).unwrap();
        assert_eq!(c, full);
    }

    #[test]
    fn picks_the_seeded_blob() {
        let g = grid();
        let a = |x: &[f64]| (x[0] + 0.5).powi(2) + x[1].powi(2) < 0.1;
        let b = |x: &[f64]| (x[0] - 0.5).powi(2) + x[1].powi(2) < 0.1;
        let both = RegionMask::from_predicate(&g, |x| a(x) || b(x));
        let only_a = RegionMask::from_predicate(&g, a);
        let seed = g.nearest_node(&[-0.5, 0.0]).unwrap();
        assert_eq!(connected_component(&both, seed).unwrap(), only_a);
    }

    #[test]
    fn seed_outside_is_an_error() {
        let g = grid();
        let m = RegionMask::ball(&g, 0.3);
        let seed = g.nearest_node(&[0.9, 0.9]).unwrap();
        assert!(matches!(
            connected_component(&m, seed),
            Err(Error::SeedOutsideMask(_))
        ));
    }

    #[test]
    fn diagonal_neighbours_are_not_adjacent() {
        let g = grid();
        let p = g.nearest_node(&[0.0, 0.0]).unwrap();
        let q = g.nearest_node(&[0.125, 0.125]).unwrap();
        let mut inside = vec![false; g.len()];
        inside[p] = true;
        inside[q] = true;
        let m = RegionMask::new(g, inside).unwrap();
        assert_eq!(connected_component(&m, p).unwrap().count(), 1);
    }
}
