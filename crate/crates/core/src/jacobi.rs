//! Residuals of the trace and boundary Jacobi inequalities.
//!
//! Hessian variant, with `F = Δu I − D²u` and `f ≥ 1`:
//! `Δ_F Δu − (2−ε)|∇_F Δu|²/Δu ≥ Δf − C(ε)|Df|²`.
//!
//! Curvature variant, with `F` from [`crate::geometry`] and `f > 0`:
//! `Δ_F H − (2−ε)|∇_F H|²/H ≥ Δ_M f − C(ε) f⁻¹|∇_M f|²`.
//!
//! Residual fields hold left side minus right side, so the inequality reads
//! `residual ≥ 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    fd_hessian, Derivatives, Provenance, RegionMask, ScalarField, SymMatField,
};
use crate::geometry::{build_graph_frame, packed_contract, packed_quadratic, surface_laplacians, GraphFrame};

/// Default `ε` in both variants.
pub const DEFAULT_EPS: f64 = 0.5;

/// `C(ε) = 18/ε + 3`.
pub fn default_constant(eps: f64) -> f64 {
    18.0 / eps + 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantPolicy {
    pub c_eps: f64,
    pub formula: String,
}

impl ConstantPolicy {
    pub fn default_for(eps: f64) -> Self {
        ConstantPolicy {
            c_eps: default_constant(eps),
            formula: "C(eps) = 18/eps + 3".into(),
        }
    }

    pub fn fixed(c: f64) -> Self {
        ConstantPolicy {
            c_eps: c,
            formula: format!("C = {c} (user supplied)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hessian,
    Curvature,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hessian" => Ok(Variant::Hessian),
            "curvature" => Ok(Variant::Curvature),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct JacobiReport {
    pub residual: ScalarField,
    pub min_residual: f64,
    /// Node where the minimum is attained.
    pub argmin: Option<usize>,
    pub epsilon: f64,
    pub constant_policy: ConstantPolicy,
    pub variant: Variant,
    pub mask: RegionMask,
    /// The gradient penalty multiplying `C`, spelled out.
    pub penalty: &'static str,
    pub u_provenance: Provenance,
    pub f_provenance: Provenance,
}

/// Serializable part of a [`JacobiReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobiSummary {
    pub variant: Variant,
    pub epsilon: f64,
    pub constant_policy: ConstantPolicy,
    pub penalty: String,
    pub min_residual: f64,
    pub argmin_coords: Option<Vec<f64>>,
    pub mask_nodes: usize,
    pub spacing: f64,
    pub u_provenance: Provenance,
    pub f_provenance: Provenance,
}

impl JacobiReport {
    fn assemble(
        residual: ScalarField,
        mask: &RegionMask,
        epsilon: f64,
        constant_policy: ConstantPolicy,
        variant: Variant,
        penalty: &'static str,
        provenance: (Provenance, Provenance),
    ) -> Self {
        let mut min_residual = f64::INFINITY;
        let mut argmin = None;
        for node in mask.nodes() {
            if residual.at(node) < min_residual {
                min_residual = residual.at(node);
                argmin = Some(node);
            }
        }
        if argmin.is_none() {
            min_residual = 0.0;
        }
        JacobiReport {
            residual,
            min_residual,
            argmin,
            epsilon,
            constant_policy,
            variant,
            mask: mask.clone(),
            penalty,
            u_provenance: provenance.0,
            f_provenance: provenance.1,
        }
    }

    pub fn summary(&self) -> JacobiSummary {
        JacobiSummary {
            variant: self.variant,
            epsilon: self.epsilon,
            constant_policy: self.constant_policy.clone(),
            penalty: self.penalty.to_string(),
            min_residual: self.min_residual,
            argmin_coords: self.argmin.map(|n| self.residual.grid().coords_vec(n)),
            mask_nodes: self.mask.count(),
            spacing: self.residual.grid().spacing(),
            u_provenance: self.u_provenance,
            f_provenance: self.f_provenance,
        }
    }
}

fn check_eps(eps: f64, variant: Variant) -> Result<()> {
    let ok = match variant {
        Variant::Hessian => eps > 0.0 && eps < 1.0,
        Variant::Curvature => eps > 0.0 && eps <= 1.0,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::EpsilonOutOfRange {
            eps,
            range: match variant {
                Variant::Hessian => "(0, 1)",
                Variant::Curvature => "(0, 1]",
            },
        })
    }
}

fn check_positive(field: &ScalarField, mask: &RegionMask, floor: f64, what: &str) -> Result<()> {
    for node in mask.nodes() {
        let v = field.at(node);
        if !(v > floor) {
            let x = field.grid().coords_vec(node);
            return Err(Error::Hypothesis(format!(
                "{what} = {v} at {x:?} (need > {floor})"
            )));
        }
    }
    Ok(())
}

fn check_at_least(field: &ScalarField, mask: &RegionMask, floor: f64, what: &str) -> Result<()> {
    for node in mask.nodes() {
        let v = field.at(node);
        if v < floor - 1e-12 {
            let x = field.grid().coords_vec(node);
            return Err(Error::Hypothesis(format!(
                "{what} = {v} at {x:?} (need >= {floor})"
            )));
        }
    }
    Ok(())
}

/// Derivative data for the Hessian variant.
#[derive(Clone, Debug)]
pub struct HessianInput {
    pub u: Derivatives,
    /// `Δu` with its own gradient and Hessian.
    pub lap: Derivatives,
    pub f: Derivatives,
}

impl HessianInput {
    /// Everything by finite differences of sampled `u` and `f`.
    pub fn from_samples(u: &ScalarField, f: &ScalarField) -> Result<Self> {
        u.grid().ensure_same(f.grid())?;
        let u = Derivatives::from_fd(u);
        let lap = Derivatives::from_fd(&u.hessian.trace());
        Ok(HessianInput {
            u,
            lap,
            f: Derivatives::from_fd(f),
        })
    }
}

/// Derivative data for the curvature variant.
#[derive(Clone, Debug)]
pub struct CurvatureInput {
    pub frame: GraphFrame,
    /// Mean curvature `H` with its gradient and Hessian.
    pub mean: Derivatives,
    pub f: Derivatives,
}

impl CurvatureInput {
    pub fn from_samples(u: &ScalarField, f: &ScalarField) -> Result<Self> {
        u.grid().ensure_same(f.grid())?;
        let frame = build_graph_frame(&Derivatives::from_fd(u));
        let mean = Derivatives::from_fd(&frame.mean);
        Ok(CurvatureInput {
            frame,
            mean,
            f: Derivatives::from_fd(f),
        })
    }

    pub fn from_frame(frame: GraphFrame, f: Derivatives) -> Self {
        let mean = Derivatives::from_fd(&frame.mean);
        CurvatureInput { frame, mean, f }
    }
}

/// `F = Δu I − D²u` at every node.
pub fn hessian_coefficients(d2u: &SymMatField) -> SymMatField {
    let grid = d2u.grid();
    let n = grid.dim();
    let diag: Vec<usize> = (0..n).map(|i| crate::field::packed_index(n, i, i)).collect();
    let p = crate::field::packed_len(n);
    let mut out: Vec<f64> = d2u.values().iter().map(|v| -v).collect();
    out.par_chunks_mut(p).for_each(|m| {
        let tr: f64 = diag.iter().map(|&d| -m[d]).sum();
        for &d in &diag {
            m[d] += tr;
        }
    });
    SymMatField::new(grid.clone(), out).expect("finite coefficients")
}

/// Flat `Δ_F v = F:D²v` and `|∇_F v|² = Dvᵀ F Dv`.
fn flat_operators(fc: &SymMatField, v: &Derivatives) -> (Vec<f64>, Vec<f64>) {
    let n = fc.grid().dim();
    (0..fc.grid().len())
        .into_par_iter()
        .map(|node| {
            (
                packed_contract(n, fc.at(node), v.hessian.at(node)),
                packed_quadratic(n, fc.at(node), v.gradient.at(node)),
            )
        })
        .unzip()
}

fn grad_sq(d: &Derivatives, node: usize) -> f64 {
    d.gradient.at(node).iter().map(|c| c * c).sum()
}

/// Hessian-variant trace Jacobi residual on `mask`.
pub fn trace_jacobi_hessian(
    input: &HessianInput,
    eps: f64,
    policy: Option<ConstantPolicy>,
    mask: &RegionMask,
) -> Result<JacobiReport> {
    check_eps(eps, Variant::Hessian)?;
    let grid = input.u.grid();
    grid.ensure_same(mask.grid())?;
    check_positive(&input.lap.value, mask, 0.0, "Laplacian of u")?;
    check_at_least(&input.f.value, mask, 1.0, "f")?;
    let policy = policy.unwrap_or_else(|| ConstantPolicy::default_for(eps));
    let c = policy.c_eps;
    let fc = hessian_coefficients(&input.u.hessian);
    let (delta_f, grad_f) = flat_operators(&fc, &input.lap);
    let vals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            if !mask.contains(node) {
                return 0.0;
            }
            let a = input.lap.value.at(node);
            let lap_f = input.f.hessian.trace_at(node);
            delta_f[node] - (2.0 - eps) * grad_f[node] / a - lap_f + c * grad_sq(&input.f, node)
        })
        .collect();
    let residual = ScalarField::new(grid.clone(), vals)?;
    Ok(JacobiReport::assemble(
        residual,
        mask,
        eps,
        policy,
        Variant::Hessian,
        "|Df|^2",
        (input.u.provenance, input.f.provenance),
    ))
}

/// Curvature-variant trace Jacobi residual on `mask`.
pub fn trace_jacobi_curvature(
    input: &CurvatureInput,
    eps: f64,
    policy: Option<ConstantPolicy>,
    mask: &RegionMask,
) -> Result<JacobiReport> {
    check_eps(eps, Variant::Curvature)?;
    let grid = input.frame.grid();
    grid.ensure_same(mask.grid())?;
    check_positive(&input.mean.value, mask, 0.0, "mean curvature H")?;
    check_positive(&input.f.value, mask, 0.0, "f")?;
    let policy = policy.unwrap_or_else(|| ConstantPolicy::default_for(eps));
    let c = policy.c_eps;
    let h_ops = surface_laplacians(&input.mean, &input.frame);
    let f_ops = surface_laplacians(&input.f, &input.frame);
    let vals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            if !mask.contains(node) {
                return 0.0;
            }
            let h = input.mean.value.at(node);
            let f = input.f.value.at(node);
            h_ops.delta_f.at(node) - (2.0 - eps) * h_ops.grad_f_sq.at(node) / h
                - f_ops.delta_m.at(node)
                + c * f_ops.grad_m_sq.at(node) / f
        })
        .collect();
    let residual = ScalarField::new(grid.clone(), vals)?;
    Ok(JacobiReport::assemble(
        residual,
        mask,
        eps,
        policy,
        Variant::Curvature,
        "f^-1 |grad_M f|^2",
        (input.frame.provenance(), input.f.provenance),
    ))
}

/// The cut-off profile `φ(t) = (t⁺)⁴`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CutoffPhi;

impl CutoffPhi {
    pub fn value(t: f64) -> f64 {
        if t > 0.0 {
            t.powi(4)
        } else {
            0.0
        }
    }

    pub fn d1(t: f64) -> f64 {
        if t > 0.0 {
            4.0 * t.powi(3)
        } else {
            0.0
        }
    }

    pub fn d2(t: f64) -> f64 {
        if t > 0.0 {
            12.0 * t * t
        } else {
            0.0
        }
    }
}

/// Checks `φ''φ ≥ (2/3)φ'²` in the form `3φ''φ ≥ 2φ'²` at every sample.
pub fn phi_contract_check(samples: &[f64]) -> bool {
    samples.iter().all(|&t| {
        3.0 * CutoffPhi::d2(t) * CutoffPhi::value(t) >= 2.0 * CutoffPhi::d1(t).powi(2)
    })
}

/// `ε` used inside the boundary Jacobi inequality.
pub const BOUNDARY_EPS: f64 = 0.5;

/// Boundary Jacobi residual for `φ(w−u)·A`, `A = Δu` or `H`.
///
/// `Δ_F[φA] − φ'Δ_F(w−u)·A − [Δf − C·penalty]·φ` on `{w > u} ∩ mask`, zero elsewhere.
/// `w` carries its own derivatives, so an analytic barrier can be passed in.
pub fn boundary_jacobi(
    variant: Variant,
    hessian: Option<&HessianInput>,
    curvature: Option<&CurvatureInput>,
    w: &Derivatives,
    policy: Option<ConstantPolicy>,
    mask: &RegionMask,
) -> Result<JacobiReport> {
    let eps = BOUNDARY_EPS;
    let policy = policy.unwrap_or_else(|| ConstantPolicy::default_for(eps));
    let c = policy.c_eps;
    let (u, a, f) = match variant {
        Variant::Hessian => {
            let h = hessian.ok_or_else(|| Error::Config("hessian input required".into()))?;
            check_positive(&h.lap.value, mask, 0.0, "Laplacian of u")?;
            check_at_least(&h.f.value, mask, 1.0, "f")?;
            (&h.u, &h.lap, &h.f)
        }
        Variant::Curvature => {
            let k = curvature.ok_or_else(|| Error::Config("curvature input required".into()))?;
            check_positive(&k.mean.value, mask, 0.0, "mean curvature H")?;
            check_positive(&k.f.value, mask, 0.0, "f")?;
            (&k.frame.u, &k.mean, &k.f)
        }
    };
    let grid = u.grid();
    grid.ensure_same(w.grid())?;
    grid.ensure_same(mask.grid())?;
    // t = w − u with exact derivative differences
    let t_val = w.value.zip_map(&u.value, |a, b| a - b)?;
    let sub = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a - b).collect() };
    let t = Derivatives {
        gradient: crate::field::VectorField::new(grid.clone(), sub(w.gradient.values(), u.gradient.values()))?,
        hessian: SymMatField::new(grid.clone(), sub(w.hessian.values(), u.hessian.values()))?,
        value: t_val.clone(),
        provenance: w.provenance,
    };
    let product = ScalarField::new(
        grid.clone(),
        (0..grid.len())
            .map(|node| CutoffPhi::value(t_val.at(node)) * a.value.at(node))
            .collect(),
    )?;
    let prod = Derivatives {
        hessian: fd_hessian(&product),
        gradient: crate::field::fd_gradient(&product),
        value: product,
        provenance: Provenance::FiniteDifference,
    };

    let (lhs, delta_t, lap_f, pen): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = match variant {
        Variant::Hessian => {
            let fc = hessian_coefficients(&u.hessian);
            let (lhs, _) = flat_operators(&fc, &prod);
            let (dt, _) = flat_operators(&fc, &t);
            let lap_f = (0..grid.len()).map(|node| f.hessian.trace_at(node)).collect();
            let pen = (0..grid.len()).map(|node| grad_sq(f, node)).collect();
            (lhs, dt, lap_f, pen)
        }
        Variant::Curvature => {
            let frame = &curvature.expect("checked above").frame;
            let lhs = surface_laplacians(&prod, frame).delta_f.into_values();
            let dt = surface_laplacians(&t, frame).delta_f.into_values();
            let fo = surface_laplacians(f, frame);
            let pen = (0..grid.len())
                .map(|node| fo.grad_m_sq.at(node) / f.value.at(node))
                .collect();
            (lhs, dt, fo.delta_m.into_values(), pen)
        }
    };
    let vals: Vec<f64> = (0..grid.len())
        .map(|node| {
            let tv = t_val.at(node);
            if !mask.contains(node) || tv <= 0.0 {
                return 0.0;
            }
            let rhs = CutoffPhi::d1(tv) * delta_t[node] * a.value.at(node)
                + (lap_f[node] - c * pen[node]) * CutoffPhi::value(tv);
            lhs[node] - rhs
        })
        .collect();
    let residual = ScalarField::new(grid.clone(), vals)?;
    let support = RegionMask::above(&t_val, 0.0).and(mask)?;
    Ok(JacobiReport::assemble(
        residual,
        &support,
        eps,
        policy,
        variant,
        match variant {
            Variant::Hessian => "|Df|^2",
            Variant::Curvature => "f^-1 |grad_M f|^2",
        },
        (u.provenance, f.provenance),
    ))
}

/// Richardson-based tolerance between a report at `h` and one at `h/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RichardsonCheck {
    /// `max |r_h − r_{h/2}| / (0.75 h²)` over coarse masked nodes.
    pub c_fd: f64,
    pub h: f64,
    pub tolerance: f64,
    pub min_residual: f64,
    pub pass: bool,
}

/// Compares `coarse` (spacing `h`) with `fine` (spacing `h/2`) at shared nodes.
pub fn richardson_check(coarse: &JacobiReport, fine: &JacobiReport) -> Result<RichardsonCheck> {
    let gc = coarse.residual.grid();
    let gf = fine.residual.grid();
    let h = gc.spacing();
    if (gf.spacing() * 2.0 - h).abs() > 1e-12 * h {
        return Err(Error::Config("fine grid must have half the coarse spacing".into()));
    }
    let mut diff = 0.0f64;
    for node in coarse.mask.nodes() {
        let x = gc.coords_vec(node);
        let fnode = gf
            .nearest_node(&x)
            .ok_or_else(|| Error::Config("coarse node outside fine grid".into()))?;
        if !fine.mask.contains(fnode) {
            continue;
        }
        diff = diff.max((coarse.residual.at(node) - fine.residual.at(fnode)).abs());
    }
    let c_fd = diff / (0.75 * h * h);
    let tolerance = c_fd * h * h + 1e-8;
    Ok(RichardsonCheck {
        c_fd,
        h,
        tolerance,
        min_residual: coarse.min_residual,
        pass: coarse.min_residual >= -tolerance,
    })
}

/// One member of a non-convex scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub param: f64,
    pub convex: bool,
    pub min_eigenvalue: f64,
    pub min_laplacian: f64,
    pub min_f: f64,
    pub min_residual: f64,
    /// Negative beyond the Richardson tolerance.
    pub failure_demonstrated: bool,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub rows: Vec<ScanRow>,
    /// Members skipped because `Δu ≤ 0` somewhere on the mask.
    pub out_of_hypothesis: Vec<f64>,
}

/// Saddle-perturbed family `|x|²/2 + a(x₁² − x₂²)·exp(−|x|²)`.
pub fn saddle_member(a: f64) -> impl Fn(&[f64]) -> f64 + Sync + Copy {
    move |x: &[f64]| {
        let r2: f64 = x.iter().map(|c| c * c).sum();
        0.5 * r2 + a * (x[0] * x[0] - x[1] * x[1]) * (-r2).exp()
    }
}

/// Hessian-variant residual of the saddle family, sampled at `h` and `h/2`.
///
/// `f` is `σ₂(D²u)` of the discrete Hessian, so every member satisfies its own
/// equation; the sign of the residual is reported, never asserted.
pub fn nonconvex_scan(
    dim: usize,
    half_width: f64,
    h: f64,
    params: &[f64],
    eps: f64,
) -> Result<ScanReport> {
    use crate::field::Grid;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for &a in params {
        let member = saddle_member(a);
        let mut reports = Vec::with_capacity(2);
        let mut stats = None;
        for (level, spacing) in [h, h / 2.0].into_iter().enumerate() {
            let grid = Grid::cube(dim, half_width, spacing)?;
            let u = ScalarField::from_fn(&grid, member);
            let d2 = fd_hessian(&u);
            let f = ScalarField::new(
                grid.clone(),
                (0..grid.len())
                    .map(|node| crate::sigma2::sigma2_packed(dim, d2.at(node)))
                    .collect(),
            )?;
            let mask = RegionMask::interior(&grid, 2);
            let input = HessianInput::from_samples(&u, &f)?;
            let (lap_min, _) = crate::field::masked_extrema(&input.lap.value, &mask).unwrap_or((0.0, 0.0));
            if !(lap_min > 0.0) {
                stats = None;
                break;
            }
            if level == 0 {
                let mut min_eig = f64::INFINITY;
                for node in mask.nodes() {
                    min_eig = min_eig.min(crate::sigma2::Spectrum::of_symmetric(&d2.matrix_at(node)).min());
                }
                let (min_f, _) = crate::field::masked_extrema(&f, &mask).unwrap_or((0.0, 0.0));
                stats = Some((min_eig, lap_min, min_f));
            }
            // the scan measures the inequality itself, so the f ≥ 1 guard is bypassed
            reports.push(raw_hessian_residual(&input, eps, &mask)?);
        }
        match stats {
            Some((min_eigenvalue, min_laplacian, min_f)) => {
                let rc = richardson_check(&reports[0], &reports[1])?;
                rows.push(ScanRow {
                    param: a,
                    convex: min_eigenvalue >= 0.0,
                    min_eigenvalue,
                    min_laplacian,
                    min_f,
                    min_residual: rc.min_residual,
                    failure_demonstrated: !rc.pass,
                    tolerance: rc.tolerance,
                });
            }
            None => out.push(a),
        }
    }
    Ok(ScanReport {
        rows,
        out_of_hypothesis: out,
    })
}

fn raw_hessian_residual(input: &HessianInput, eps: f64, mask: &RegionMask) -> Result<JacobiReport> {
    let grid = input.u.grid();
    let policy = ConstantPolicy::default_for(eps);
    let c = policy.c_eps;
    let fc = hessian_coefficients(&input.u.hessian);
    let (delta_f, grad_f) = flat_operators(&fc, &input.lap);
    let vals: Vec<f64> = (0..grid.len())
        .map(|node| {
            if !mask.contains(node) {
                return 0.0;
            }
            let a = input.lap.value.at(node);
            delta_f[node] - (2.0 - eps) * grad_f[node] / a - input.f.hessian.trace_at(node)
                + c * grad_sq(&input.f, node)
        })
        .collect();
    Ok(JacobiReport::assemble(
        ScalarField::new(grid.clone(), vals)?,
        mask,
        eps,
        policy,
        Variant::Hessian,
        "|Df|^2",
        (input.u.provenance, input.f.provenance),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;

    fn quad_input(g: &Grid) -> HessianInput {
        // u = (x² + 2y² + 3z²)/2, σ₂ = 2 + 3 + 6 = 11
        let u = ScalarField::from_fn(g, |x| 0.5 * (x[0] * x[0] + 2.0 * x[1] * x[1] + 3.0 * x[2] * x[2]));
        let f = ScalarField::constant(g, 11.0);
        HessianInput::from_samples(&u, &f).unwrap()
    }

    #[test]
    fn quadratic_residual_vanishes() {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let mask = RegionMask::interior(&g, 2);
        let r = trace_jacobi_hessian(&quad_input(&g), 0.5, None, &mask).unwrap();
        assert!(r.residual.max_abs() < 1e-10);
        assert_eq!(r.constant_policy.c_eps, 39.0);
    }

    #[test]
    fn epsilon_ranges_differ_by_variant() {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let mask = RegionMask::interior(&g, 2);
        assert!(matches!(
            trace_jacobi_hessian(&quad_input(&g), 1.0, None, &mask),
            Err(Error::EpsilonOutOfRange { .. })
        ));
        let u = ScalarField::from_fn(&g, |x| 0.5 * x.iter().map(|c| c * c).sum::<f64>());
        let inp = CurvatureInput::from_samples(&u, &ScalarField::constant(&g, 1.0)).unwrap();
        assert!(trace_jacobi_curvature(&inp, 1.0, None, &mask).is_ok());
        assert!(trace_jacobi_curvature(&inp, 0.0, None, &mask).is_err());
    }

    #[test]
    fn small_f_is_rejected() {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let mut inp = quad_input(&g);
        inp.f = Derivatives::from_fd(&ScalarField::constant(&g, 0.5));
        let mask = RegionMask::interior(&g, 2);
        assert!(matches!(
            trace_jacobi_hessian(&inp, 0.5, None, &mask),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn affine_graph_has_no_mean_curvature() {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let u = ScalarField::from_fn(&g, |x| x[0] - 2.0 * x[2]);
        let inp = CurvatureInput::from_samples(&u, &ScalarField::constant(&g, 1.0)).unwrap();
        let mask = RegionMask::interior(&g, 2);
        assert!(matches!(
            trace_jacobi_curvature(&inp, 0.5, None, &mask),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn boundary_residual_vanishes_below_u() {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let inp = quad_input(&g);
        let w = Derivatives::from_fd(&inp.u.value.map(|v| v - 1.0));
        let mask = RegionMask::interior(&g, 2);
        let r = boundary_jacobi(Variant::Hessian, Some(&inp), None, &w, None, &mask).unwrap();
        assert!(r.residual.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifted_quadratic_barrier() {
        // w = u + c: φ = c⁴ constant, Δu constant, so both sides vanish
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let inp = quad_input(&g);
        let w = Derivatives::from_fd(&inp.u.value.map(|v| v + 0.3));
        let mask = RegionMask::interior(&g, 2);
        let r = boundary_jacobi(Variant::Hessian, Some(&inp), None, &w, None, &mask).unwrap();
        assert!(r.min_residual.abs() < 1e-9, "{}", r.min_residual);
    }

    #[test]
    fn eps_monotonicity_is_arithmetic() {
        let g = Grid::cube(3, 0.5, 1.0 / 16.0).unwrap();
        let u = ScalarField::from_fn(&g, |x| x.iter().map(|c| c.exp() + 0.5 * c * c).sum::<f64>());
        let f = ScalarField::from_fn(&g, |x| {
            let l: Vec<f64> = x.iter().map(|c| c.exp() + 1.0).collect();
            l[0] * l[1] + l[0] * l[2] + l[1] * l[2]
        });
        let inp = HessianInput::from_samples(&u, &f).unwrap();
        let mask = RegionMask::interior(&g, 2);
        let (e1, e2) = (0.25, 0.75);
        let r1 = trace_jacobi_hessian(&inp, e1, None, &mask).unwrap();
        let r2 = trace_jacobi_hessian(&inp, e2, None, &mask).unwrap();
        let fc = hessian_coefficients(&inp.u.hessian);
        let (_, gf) = flat_operators(&fc, &inp.lap);
        for node in mask.nodes() {
            let want = -(e2 - e1) * gf[node] / inp.lap.value.at(node)
                + (default_constant(e1) - default_constant(e2)) * grad_sq(&inp.f, node);
            let got = r1.residual.at(node) - r2.residual.at(node);
            assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn phi_contract() {
        assert!(phi_contract_check(&[-1.0, 0.0, 1.0]));
        let sweep: Vec<f64> = (0..=4000).map(|i| -2.0 + i as f64 * 1e-3).collect();
        assert!(phi_contract_check(&sweep));
    }
}
