use serde::{Deserialize, Serialize};

use super::fields::ScalarField;
use super::region::RegionMask;
use super::stencil::fd_gradient;
use crate::error::Result;

/// Result of a masked quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Integral {
    pub value: f64,
    /// Set when the mask selected no nodes; `value` is then 0.
    pub empty_mask: bool,
}

/// Quadrature weight of `node` relative to `h^n`: halved once per box face the node sits on.
///
/// With these weights the rule is the composite trapezoid rule on the full box,
/// and the plain midpoint sum `Σ v h^n` everywhere away from the faces.
pub fn node_weight(grid: &super::grid::Grid, node: usize) -> f64 {
    let mut rest = node;
    let mut w = 1.0;
    for (axis, &stride) in grid.strides().iter().enumerate() {
        let i = rest / stride;
        rest %= stride;
        if i == 0 || i + 1 == grid.shape()[axis] {
            w *= 0.5;
        }
    }
    w
}

/// `∫_mask v dx`, summed sequentially in node order.
pub fn integrate(v: &ScalarField, mask: &RegionMask) -> Result<Integral> {
    v.grid().ensure_same(mask.grid())?;
    let grid = v.grid();
    let mut acc = 0.0;
    let mut any = false;
    for node in mask.nodes() {
        any = true;
        acc += node_weight(grid, node) * v.at(node);
    }
    if !any {
        log::warn!("integrate: empty mask, returning 0");
    }
    Ok(Integral {
        value: acc * grid.cell_volume(),
        empty_mask: !any,
    })
}

/// Sup norm and Lipschitz proxy of a field over a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzNorm {
    pub sup: f64,
    pub lip: f64,
}

impl LipschitzNorm {
    /// `sup + lip`, the C^{0,1} proxy.
    pub fn c01(&self) -> f64 {
        self.sup + self.lip
    }
}

pub fn lipschitz_norm(v: &ScalarField, mask: &RegionMask) -> Result<LipschitzNorm> {
    v.grid().ensure_same(mask.grid())?;
    if mask.is_empty() {
        return Err(crate::error::Error::Hypothesis(
            "Lipschitz norm over an empty mask".into(),
        ));
    }
    let grad = fd_gradient(v);
    let norms = grad.norms();
    let mut sup = 0.0f64;
    let mut lip = 0.0f64;
    for node in mask.nodes() {
        sup = sup.max(v.at(node).abs());
        lip = lip.max(norms.at(node));
    }
    Ok(LipschitzNorm { sup, lip })
}

/// Max and min of a field over a mask, `None` for an empty mask.
pub fn masked_extrema(v: &ScalarField, mask: &RegionMask) -> Option<(f64, f64)> {
    let mut it = mask.nodes().map(|n| v.at(n));
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x))))
}
