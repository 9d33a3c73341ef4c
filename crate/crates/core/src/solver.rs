//! Damped Newton solver for `σ₂(D²u) = f` with Dirichlet data, the
//! manufactured-solution catalog and convexity certificates.
//!
//! Boundary data occupies the outermost two node layers; every unknown sits
//! at least two layers inside, so the central stencils never leave the box.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    fd_hessian, packed_len, unpack, AnalyticField, Derivatives, Grid, RegionMask, ScalarField,
};
use crate::geometry::point_frame;
use crate::jacobi::Variant;
use crate::sigma2::sigma2_packed;

/// Node layers holding Dirichlet data.
pub const BOUNDARY_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityPolicy {
    /// Record the certificate at every accepted step.
    Monitor,
    /// Shorten a step until the trial iterate is certified convex.
    Project,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// Poisson guess if it lies in Γ₂, else the boundary field if that does.
    Auto,
    /// `Δ_h u = n √(2f / (n(n−1)))` with the boundary layers fixed.
    Poisson,
    /// Interior values of the supplied boundary field.
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub initial_guess: InitialGuess,
    pub max_iters: usize,
    /// Sup norm of `σ₂(D²u) − f` over the unknowns.
    pub residual_tol: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
    pub convexity: ConvexityPolicy,
    /// Floor for the relative tolerance of each linear solve.
    pub linear_tol: f64,
    pub linear_max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            initial_guess: InitialGuess::Auto,
            max_iters: 50,
            residual_tol: 1e-10,
            backtrack: 0.5,
            max_halvings: 20,
            convexity: ConvexityPolicy::Monitor,
            linear_tol: 1e-13,
            linear_max_iters: 5000,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tol > 0.0) {
            return Err(Error::Config(format!("residual_tol = {} must be positive", self.residual_tol)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config(format!("backtrack = {} outside (0,1)", self.backtrack)));
        }
        if !(self.linear_tol > 0.0 && self.linear_tol < 1.0) {
            return Err(Error::Config(format!("linear_tol = {} outside (0,1)", self.linear_tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityCertificate {
    pub min_eig: f64,
    pub tol: f64,
    pub pass: bool,
    pub argmin: Option<usize>,
}

/// Γ₂ membership over the unknowns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSummary {
    pub min_trace: f64,
    pub min_sigma2: f64,
    pub nodes_outside: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub residual: f64,
    pub step: f64,
    pub halvings: usize,
    pub linear_iterations: usize,
    pub linear_relative_residual: f64,
    pub min_eig: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// Sup residual of the initial guess followed by every accepted iterate.
    pub residual_history: Vec<f64>,
    pub steps: Vec<NewtonStep>,
    pub convexity: ConvexityCertificate,
    pub cone: ConeSummary,
    pub unknowns: usize,
    pub initial_guess: InitialGuess,
    pub poisson_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub u: ScalarField,
    pub diag: SolveDiagnostics,
}

/// Unknown nodes and central stencils on them.
struct Layout<'a> {
    grid: &'a Grid,
    unknowns: Vec<usize>,
    inv_h2: f64,
}

impl<'a> Layout<'a> {
    fn new(domain: &'a RegionMask) -> Result<Self> {
        let grid = domain.grid();
        let unknowns: Vec<usize> = domain.nodes().filter(|&node| grid.face_distance(node) >= 1).collect();
        if unknowns.is_empty() {
            return Err(Error::InvalidGrid("no interior unknowns".into()));
        }
        let h = grid.spacing();
        Ok(Layout {
            grid,
            unknowns,
            inv_h2: 1.0 / (h * h),
        })
    }

    #[inline]
    fn hessian_at(&self, v: &[f64], node: usize, out: &mut [f64]) {
        let s = self.grid.strides();
        let n = s.len();
        let c = v[node];
        let mut k = 0;
        for i in 0..n {
            out[k] = (v[node + s[i]] - 2.0 * c + v[node - s[i]]) * self.inv_h2;
            k += 1;
            for j in i + 1..n {
                let pp = v[node + s[i] + s[j]];
                let pm = v[node + s[i] - s[j]];
                let mp = v[node - s[i] + s[j]];
                let mm = v[node - s[i] - s[j]];
                out[k] = (pp - pm - mp + mm) * 0.25 * self.inv_h2;
                k += 1;
            }
        }
    }

    #[inline]
    fn laplacian_at(&self, v: &[f64], node: usize) -> f64 {
        let c = v[node];
        self.grid
            .strides()
            .iter()
            .map(|&s| v[node + s] - 2.0 * c + v[node - s])
            .sum::<f64>()
            * self.inv_h2
    }

    fn scatter(&self, x: &[f64], full: &mut [f64]) {
        for (&node, &v) in self.unknowns.iter().zip(x) {
            full[node] = v;
        }
    }
}

/// Current iterate evaluated at the unknowns.
struct Evaluation {
    residual: Vec<f64>,
    /// Packed Hessians, one per unknown.
    hessian: Vec<f64>,
    sup: f64,
    cone: ConeSummary,
}

fn evaluate(layout: &Layout<'_>, u: &[f64], f: &[f64]) -> Evaluation {
    let n = layout.grid.dim();
    let p = packed_len(n);
    let mut hessian = vec![0.0; layout.unknowns.len() * p];
    hessian
        .par_chunks_mut(p)
        .zip(layout.unknowns.par_iter())
        .for_each(|(out, &node)| layout.hessian_at(u, node, out));
    let stats: Vec<(f64, f64, f64)> = hessian
        .par_chunks(p)
        .zip(layout.unknowns.par_iter())
        .map(|(d2, &node)| {
            let s2 = sigma2_packed(n, d2);
            let tr = trace_packed(n, d2);
            (s2 - f[node], tr, s2)
        })
        .collect();
    let mut cone = ConeSummary {
        min_trace: f64::INFINITY,
        min_sigma2: f64::INFINITY,
        nodes_outside: 0,
    };
    let mut sup = 0.0f64;
    let mut residual = Vec::with_capacity(stats.len());
    for (r, tr, s2) in stats {
        sup = sup.max(r.abs());
        cone.min_trace = cone.min_trace.min(tr);
        cone.min_sigma2 = cone.min_sigma2.min(s2);
        if !(tr > 0.0 && s2 > 0.0) {
            cone.nodes_outside += 1;
        }
        residual.push(r);
    }
    Evaluation {
        residual,
        hessian,
        sup,
        cone,
    }
}

fn trace_packed(n: usize, p: &[f64]) -> f64 {
    let mut k = 0;
    let mut tr = 0.0;
    for i in 0..n {
        tr += p[k];
        k += n - i;
    }
    tr
}

/// Smallest eigenvalue of each packed matrix, with the sup of its entries.
fn certify_packed(n: usize, nodes: &[usize], packed: &[f64]) -> ConvexityCertificate {
    let p = packed_len(n);
    let mins: Vec<f64> = packed
        .par_chunks(p)
        .map(|d2| unpack(n, d2).symmetric_eigenvalues().min())
        .collect();
    let scale = packed.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-8 * scale;
    let mut min_eig = f64::INFINITY;
    let mut argmin = None;
    for (&node, &m) in nodes.iter().zip(&mins) {
        if m < min_eig {
            min_eig = m;
            argmin = Some(node);
        }
    }
    ConvexityCertificate {
        pass: min_eig >= -tol,
        min_eig,
        tol,
        argmin,
    }
}

/// Minimum Hessian eigenvalue over `mask`; passes when `min_eig ≥ −1e−8 ‖D²u‖_∞`.
pub fn convexity_certificate(u: &ScalarField, mask: &RegionMask) -> Result<ConvexityCertificate> {
    u.grid().ensure_same(mask.grid())?;
    let n = u.grid().dim();
    let d2 = fd_hessian(u);
    let nodes: Vec<usize> = mask.nodes().collect();
    let packed: Vec<f64> = nodes.iter().flat_map(|&node| d2.at(node).iter().copied()).collect();
    Ok(certify_packed(n, &nodes, &packed))
}

/// `J v = tr(F · D²_h v)` with `F = Δu I − D²u` frozen at the current iterate.
struct Jacobian<'a> {
    layout: &'a Layout<'a>,
    /// Packed `F` per unknown, off-diagonal entries doubled.
    coeff: Vec<f64>,
    inv_diag: Vec<f64>,
}

impl<'a> Jacobian<'a> {
    fn new(layout: &'a Layout<'a>, hessian: &[f64]) -> Self {
        let n = layout.grid.dim();
        let p = packed_len(n);
        let mut coeff = vec![0.0; hessian.len()];
        let mut inv_diag = Vec::with_capacity(layout.unknowns.len());
        for (c, d2) in coeff.chunks_mut(p).zip(hessian.chunks(p)) {
            let tr = trace_packed(n, d2);
            let mut k = 0;
            let mut diag = 0.0;
            for i in 0..n {
                c[k] = tr - d2[k];
                diag += c[k];
                k += 1;
                for _ in i + 1..n {
                    c[k] = -2.0 * d2[k];
                    k += 1;
                }
            }
            inv_diag.push(1.0 / (-2.0 * diag * layout.inv_h2));
        }
        Jacobian {
            layout,
            coeff,
            inv_diag,
        }
    }

    fn apply(&self, x: &[f64], full: &mut [f64], y: &mut [f64]) {
        let layout = self.layout;
        layout.scatter(x, full);
        let full = &*full;
        let p = packed_len(layout.grid.dim());
        y.par_iter_mut()
            .zip(layout.unknowns.par_iter())
            .zip(self.coeff.par_chunks(p))
            .for_each_init(
                || vec![0.0; p],
                |buf, ((out, &node), c)| {
                    layout.hessian_at(full, node, buf);
                    *out = c.iter().zip(buf.iter()).map(|(a, b)| a * b).sum();
                },
            );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Right-preconditioned BiCGSTAB with a diagonal preconditioner.
fn bicgstab(
    jac: &Jacobian<'_>,
    b: &[f64],
    rel_tol: f64,
    max_iters: usize,
    full: &mut [f64],
) -> Result<(Vec<f64>, usize, f64)> {
    let m = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; m];
    if bnorm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let target = rel_tol * bnorm;
    let mut r = b.to_vec();
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; m];
    let mut p = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut s = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut t = vec![0.0; m];
    let mut restarts = 0;
    for it in 1..=max_iters {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            // breakdown: restart the shadow residual once per occurrence
            restarts += 1;
            if restarts > 5 {
                return Err(Error::LinearSolve(format!("BiCGSTAB breakdown at iteration {it}")));
            }
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..m {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * jac.inv_diag[i];
        }
        jac.apply(&y, full, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            return Err(Error::LinearSolve("BiCGSTAB breakdown (r_hat . v = 0)".into()));
        }
        alpha = rho / rv;
        for i in 0..m {
            x[i] += alpha * y[i];
            s[i] = r[i] - alpha * v[i];
        }
        let snorm = norm(&s);
        if snorm <= target {
            return Ok((x, it, snorm / bnorm));
        }
        for i in 0..m {
            z[i] = s[i] * jac.inv_diag[i];
        }
        jac.apply(&z, full, &mut t);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &s) / tt };
        for i in 0..m {
            x[i] += omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        let rnorm = norm(&r);
        if !rnorm.is_finite() {
            return Err(Error::LinearSolve("non-finite residual".into()));
        }
        if rnorm <= target {
            return Ok((x, it, rnorm / bnorm));
        }
    }
    Err(Error::LinearSolve(format!(
        "BiCGSTAB did not reach relative tolerance {rel_tol:e} in {max_iters} iterations"
    )))
}

/// Solves `Δ_h u = g` at the unknowns by conjugate gradients on `−Δ_h`.
fn poisson(layout: &Layout<'_>, u: &mut [f64], g: &[f64], rel_tol: f64, max_iters: usize) -> Result<usize> {
    let m = layout.unknowns.len();
    // zero interior, keep the boundary layers
    for &node in &layout.unknowns {
        u[node] = 0.0;
    }
    let b: Vec<f64> = layout
        .unknowns
        .iter()
        .map(|&node| layout.laplacian_at(u, node) - g[node])
        .collect();
    let mut full = vec![0.0; layout.grid.len()];
    let apply = |x: &[f64], full: &mut Vec<f64>, y: &mut [f64]| {
        layout.scatter(x, full);
        let full = &*full;
        y.par_iter_mut()
            .zip(layout.unknowns.par_iter())
            .for_each(|(out, &node)| *out = -layout.laplacian_at(full, node));
    };
    let bnorm = norm(&b);
    let mut x = vec![0.0; m];
    let mut iters = 0;
    if bnorm > 0.0 {
        let mut r = b.clone();
        let mut p = r.clone();
        let mut ap = vec![0.0; m];
        let mut rr = dot(&r, &r);
        loop {
            iters += 1;
            if iters > max_iters {
                return Err(Error::LinearSolve(format!("CG did not converge in {max_iters} iterations")));
            }
            apply(&p, &mut full, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for i in 0..m {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= rel_tol * bnorm {
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..m {
                p[i] = r[i] + beta * p[i];
            }
        }
    }
    layout.scatter(&x, u);
    Ok(iters)
}

/// Newton solve of `σ₂(D²_h u) = f` at nodes two or more layers inside the box.
///
/// The boundary layers of `boundary` are kept. Its interior values matter only
/// as a fallback initial iterate (see [`InitialGuess`]); the Poisson guess uses
/// `n √(2f / (n(n−1)))`, the trace of the scalar matrix with the prescribed σ₂.
pub fn solve_dirichlet(f: &ScalarField, boundary: &ScalarField, opts: &SolveOptions) -> Result<Solution> {
    solve_dirichlet_on(f, boundary, &Domain::Box.mask(f.grid()), opts)
}

/// [`solve_dirichlet`] with unknowns restricted to `domain`; nodes outside it hold data.
pub fn solve_dirichlet_on(
    f: &ScalarField,
    boundary: &ScalarField,
    domain: &RegionMask,
    opts: &SolveOptions,
) -> Result<Solution> {
    opts.validate()?;
    let grid = f.grid();
    grid.ensure_same(boundary.grid())?;
    grid.ensure_same(domain.grid())?;
    let layout = Layout::new(domain)?;
    let n = grid.dim();
    let f0 = layout
        .unknowns
        .iter()
        .map(|&node| f.at(node))
        .fold(f64::INFINITY, f64::min);
    if !(f0 > 0.0) {
        return Err(Error::Hypothesis(format!("min f = {f0} on the interior; need f > 0")));
    }
    let fv = f.values();
    let outside = |e: &Evaluation| {
        Error::ConeExit(format!(
            "initial guess has {} nodes outside the cone (min trace {:e}, min sigma_2 {:e})",
            e.cone.nodes_outside, e.cone.min_trace, e.cone.min_sigma2
        ))
    };
    let mut u = boundary.values().to_vec();
    let mut poisson_iterations = 0;
    let mut used = opts.initial_guess;
    let mut eval = None;
    if opts.initial_guess != InitialGuess::Boundary {
        let pairs = (n * (n - 1)) as f64 / 2.0;
        let g: Vec<f64> = fv.iter().map(|&v| n as f64 * (v.max(0.0) / pairs).sqrt()).collect();
        let mut trial = u.clone();
        poisson_iterations = poisson(&layout, &mut trial, &g, 1e-12, 20 * layout.unknowns.len())?;
        let e = evaluate(&layout, &trial, fv);
        if e.cone.nodes_outside == 0 {
            u = trial;
            used = InitialGuess::Poisson;
            eval = Some(e);
        } else if opts.initial_guess == InitialGuess::Poisson {
            return Err(outside(&e));
        } else {
            log::info!("Poisson guess leaves the cone at {} nodes; using the boundary field", e.cone.nodes_outside);
        }
    }
    let mut eval = match eval {
        Some(e) => e,
        None => {
            used = InitialGuess::Boundary;
            let e = evaluate(&layout, &u, fv);
            if e.cone.nodes_outside > 0 {
                return Err(outside(&e));
            }
            e
        }
    };
    let mut history = vec![eval.sup];
    let mut steps = Vec::new();
    let mut full = vec![0.0; grid.len()];
    let mut trial = u.clone();
    while eval.sup > opts.residual_tol {
        if steps.len() >= opts.max_iters {
            return Err(Error::NoConvergence {
                iterations: steps.len(),
                residual: eval.sup,
            });
        }
        let jac = Jacobian::new(&layout, &eval.hessian);
        let rhs: Vec<f64> = eval.residual.iter().map(|r| -r).collect();
        let eta = eval.sup.clamp(opts.linear_tol, 1e-2);
        let (delta, lin_iters, lin_res) = bicgstab(&jac, &rhs, eta, opts.linear_max_iters, &mut full)?;
        drop(jac);

        let mut t = 1.0;
        let mut accepted = None;
        let mut last_reason = String::new();
        for halvings in 0..=opts.max_halvings {
            trial.copy_from_slice(&u);
            for (&node, d) in layout.unknowns.iter().zip(&delta) {
                trial[node] += t * d;
            }
            let e = evaluate(&layout, &trial, fv);
            let cert = certify_packed(n, &layout.unknowns, &e.hessian);
            let convex_ok = opts.convexity == ConvexityPolicy::Monitor || cert.pass;
            if e.cone.nodes_outside > 0 {
                last_reason = format!("{} nodes outside the cone at step {t:e}", e.cone.nodes_outside);
            } else if !convex_ok {
                last_reason = format!("convexity lost (min eig {:e}) at step {t:e}", cert.min_eig);
            } else if e.sup < eval.sup {
                accepted = Some((e, cert, halvings));
                break;
            } else {
                last_reason = format!("residual {:e} not below {:e}", e.sup, eval.sup);
            }
            t *= opts.backtrack;
        }
        let Some((e, cert, halvings)) = accepted else {
            if last_reason.contains("cone") {
                return Err(Error::ConeExit(last_reason));
            }
            log::warn!("line search failed: {last_reason}");
            return Err(Error::NoConvergence {
                iterations: steps.len(),
                residual: eval.sup,
            });
        };
        std::mem::swap(&mut u, &mut trial);
        log::debug!(
            "newton {}: residual {:e}, step {t}, {lin_iters} linear iterations",
            steps.len() + 1,
            e.sup
        );
        steps.push(NewtonStep {
            residual: e.sup,
            step: t,
            halvings,
            linear_iterations: lin_iters,
            linear_relative_residual: lin_res,
            min_eig: cert.min_eig,
        });
        history.push(e.sup);
        eval = e;
    }
    let convexity = certify_packed(n, &layout.unknowns, &eval.hessian);
    let u = ScalarField::new(grid.clone(), u)?;
    Ok(Solution {
        u,
        diag: SolveDiagnostics {
            iterations: steps.len(),
            residual_history: history,
            steps,
            convexity,
            cone: eval.cone,
            unknowns: layout.unknowns.len(),
            initial_guess: used,
            poisson_iterations,
        },
    })
}

/// Where the unknowns live.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    /// Nodes at least [`BOUNDARY_LAYERS`] inside the box.
    Box,
    /// Nodes of the closed ball off the box faces; the rest holds data.
    Ball { radius: f64 },
}

impl Domain {
    pub fn mask(&self, grid: &Grid) -> RegionMask {
        match *self {
            Domain::Box => RegionMask::interior(grid, BOUNDARY_LAYERS),
            Domain::Ball { radius } => RegionMask::ball(grid, radius)
                .and(&RegionMask::interior(grid, 1))
                .expect("same grid"),
        }
    }
}

/// Mask of the solver unknowns on the box domain.
pub fn unknown_mask(grid: &Grid) -> RegionMask {
    Domain::Box.mask(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationCheck {
    /// Largest `|tr(F D²v) − (σ₂(D²(u+tv)) − σ₂(D²(u−tv)))/(2t)|`.
    pub max_error: f64,
    pub max_directional: f64,
    pub step: f64,
    pub pass: bool,
}

/// Gradient check of the linearized operator at the unknowns; pass at `1e−6` relative.
pub fn linearization_check(u: &ScalarField, v: &ScalarField, step: f64) -> Result<LinearizationCheck> {
    let grid = u.grid();
    grid.ensure_same(v.grid())?;
    let mask = unknown_mask(grid);
    let layout = Layout::new(&mask)?;
    let n = grid.dim();
    let p = packed_len(n);
    let plus = u.zip_map(v, |a, b| a + step * b)?;
    let minus = u.zip_map(v, |a, b| a - step * b)?;
    let mut hu = vec![0.0; p];
    let mut hv = vec![0.0; p];
    let mut hp = vec![0.0; p];
    let mut hm = vec![0.0; p];
    let mut max_error = 0.0f64;
    let mut max_directional = 0.0f64;
    for &node in &layout.unknowns {
        layout.hessian_at(u.values(), node, &mut hu);
        layout.hessian_at(v.values(), node, &mut hv);
        layout.hessian_at(plus.values(), node, &mut hp);
        layout.hessian_at(minus.values(), node, &mut hm);
        let s = unpack(n, &hu);
        let coeff = DMatrix::identity(n, n) * s.trace() - &s;
        let lin = coeff.component_mul(&unpack(n, &hv)).sum();
        let fd = (sigma2_packed(n, &hp) - sigma2_packed(n, &hm)) / (2.0 * step);
        max_error = max_error.max((lin - fd).abs());
        max_directional = max_directional.max(lin.abs());
    }
    Ok(LinearizationCheck {
        pass: max_error <= 1e-6 * max_directional.max(1.0),
        max_error,
        max_directional,
        step,
    })
}

/// Manufactured problems. `name` selects the case; remaining fields are its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Case {
    /// `½ xᵀAx`; `A = I` when omitted.
    Quadratic {
        #[serde(default)]
        a: Option<Vec<Vec<f64>>>,
    },
    /// `|x|²/2 + ε Π cos xᵢ`
    ParaboloidPerturbed { eps: f64 },
    /// `Σ e^{xᵢ} + c|x|²/2`
    ExpSum {
        #[serde(default)]
        c: f64,
    },
    /// `|x|²/2 + a|x|⁴/4`
    RadialQuartic {
        #[serde(default = "one")]
        a: f64,
    },
    /// `f = 1 + sin(k x₁)/(2k)` with boundary data `c|x|²/2`, `σ₂(cI) = 3/2`.
    FOscillatoryFamily { k: f64 },
}

fn one() -> f64 {
    1.0
}

pub const CATALOG: [&str; 5] = [
    "quadratic",
    "paraboloid_perturbed",
    "exp_sum",
    "radial_quartic",
    "f_oscillatory_family",
];

impl Case {
    /// Builds a case from a catalog name and a JSON object of parameters.
    pub fn from_name(name: &str, params: &serde_json::Value) -> Result<Self> {
        if !CATALOG.contains(&name) {
            return Err(Error::UnknownCase(name.to_string()));
        }
        let mut obj = match params {
            serde_json::Value::Null => serde_json::Map::new(),
            serde_json::Value::Object(m) => m.clone(),
            other => return Err(Error::Config(format!("case parameters must be an object, got {other}"))),
        };
        obj.insert("name".into(), serde_json::Value::String(name.into()));
        Ok(serde_json::from_value(serde_json::Value::Object(obj))?)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Case::Quadratic { .. } => "quadratic",
            Case::ParaboloidPerturbed { .. } => "paraboloid_perturbed",
            Case::ExpSum { .. } => "exp_sum",
            Case::RadialQuartic { .. } => "radial_quartic",
            Case::FOscillatoryFamily { .. } => "f_oscillatory_family",
        }
    }

    /// Closed-form exact solution, if the case has one.
    pub fn exact(&self, n: usize) -> Result<Option<Box<dyn AnalyticField>>> {
        Ok(match self {
            Case::Quadratic { a } => {
                let m = match a {
                    None => DMatrix::identity(n, n),
                    Some(rows) => {
                        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                            return Err(Error::DimensionMismatch {
                                expected: n,
                                got: rows.len(),
                            });
                        }
                        DMatrix::from_fn(n, n, |i, j| rows[i][j])
                    }
                };
                if (&m - m.transpose()).amax() > 0.0 {
                    return Err(Error::Config("quadratic matrix must be symmetric".into()));
                }
                Some(Box::new(Quadratic { a: m }))
            }
            Case::ParaboloidPerturbed { eps } => Some(Box::new(PerturbedParaboloid { n, eps: *eps })),
            Case::ExpSum { c } => Some(Box::new(ExpSum { n, c: *c })),
            Case::RadialQuartic { a } => Some(Box::new(RadialQuartic { n, a: *a })),
            Case::FOscillatoryFamily { .. } => None,
        })
    }
}

/// Closed-form regularity data for `f`, where known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FClosedForm {
    pub lip: f64,
    /// Sup of the second derivatives of `f`.
    pub c2: f64,
}

#[derive(Clone, Debug)]
pub struct Manufactured {
    pub case: Case,
    pub variant: Variant,
    pub exact: Option<Derivatives>,
    pub f: ScalarField,
    /// Dirichlet data sampled on the whole grid.
    pub boundary: ScalarField,
    pub f_closed_form: Option<FClosedForm>,
    /// Smallest Hessian eigenvalue of the exact solution over the grid.
    pub exact_min_eig: Option<f64>,
}

/// Samples a catalog case on `grid` and checks that its exact solution is convex there.
pub fn manufactured_case(case: &Case, grid: &Grid, variant: Variant) -> Result<Manufactured> {
    let n = grid.dim();
    if let Case::FOscillatoryFamily { k } = case {
        if variant != Variant::Hessian {
            return Err(Error::NotApplicable("oscillatory family is a Hessian-equation case".into()));
        }
        if !(*k > 0.0) {
            return Err(Error::Config(format!("k = {k} must be positive")));
        }
        let k = *k;
        let c = (1.5 / ((n * (n - 1)) as f64 / 2.0)).sqrt();
        return Ok(Manufactured {
            case: case.clone(),
            variant,
            exact: None,
            f: ScalarField::from_fn(grid, |x| 1.0 + (k * x[0]).sin() / (2.0 * k)),
            boundary: ScalarField::from_fn(grid, |x| 0.5 * c * x.iter().map(|v| v * v).sum::<f64>()),
            f_closed_form: Some(FClosedForm { lip: 0.5, c2: k / 2.0 }),
            exact_min_eig: None,
        });
    }
    let exact = case.exact(n)?.expect("closed-form case");
    let d = Derivatives::from_analytic(grid, exact.as_ref());
    let p = packed_len(n);
    let (mins, fs): (Vec<f64>, Vec<f64>) = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let h = d.hessian.at(node);
            let s = unpack(n, h);
            let min = s.clone().symmetric_eigenvalues().min();
            let f = match variant {
                Variant::Hessian => sigma2_packed(n, h),
                Variant::Curvature => point_frame(d.gradient.at(node), &s).sigma2_kappa,
            };
            debug_assert_eq!(h.len(), p);
            (min, f)
        })
        .unzip();
    let min_eig = mins.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_eig > 0.0) {
        return Err(Error::Hypothesis(format!(
            "{} is not strictly convex on the grid (min eigenvalue {min_eig:e})",
            case.name()
        )));
    }
    Ok(Manufactured {
        case: case.clone(),
        variant,
        f: ScalarField::new(grid.clone(), fs)?,
        boundary: d.value.clone(),
        exact: Some(d),
        f_closed_form: None,
        exact_min_eig: Some(min_eig),
    })
}

/// Sup of `|u − exact|` over `mask`.
pub fn solution_error(u: &ScalarField, exact: &ScalarField, mask: &RegionMask) -> Result<f64> {
    u.grid().ensure_same(exact.grid())?;
    Ok(mask
        .nodes()
        .map(|node| (u.at(node) - exact.at(node)).abs())
        .fold(0.0, f64::max))
}

/// `log₂(e_h / e_{h/2})`.
pub fn observed_order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

#[derive(Clone, Debug)]
struct Quadratic {
    a: DMatrix<f64>,
}

impl AnalyticField for Quadratic {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += x[i] * self.a[(i, j)] * x[j];
            }
        }
        0.5 * s
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|j| self.a[(i, j)] * x[j]).sum();
        }
    }

    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                out[k] = self.a[(i, j)];
                k += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct PerturbedParaboloid {
    n: usize,
    eps: f64,
}

impl PerturbedParaboloid {
    /// `Π_{l ∉ skip} cos x_l`
    fn cos_product(x: &[f64], skip: &[usize]) -> f64 {
        x.iter()
            .enumerate()
            .filter(|(l, _)| !skip.contains(l))
            .map(|(_, v)| v.cos())
            .product()
    }
}

impl AnalyticField for PerturbedParaboloid {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>() + self.eps * Self::cos_product(x, &[])
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = x[i] - self.eps * x[i].sin() * Self::cos_product(x, &[i]);
        }
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let all = Self::cos_product(x, &[]);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                out[k] = if i == j {
                    1.0 - self.eps * all
                } else {
                    self.eps * x[i].sin() * x[j].sin() * Self::cos_product(x, &[i, j])
                };
                k += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ExpSum {
    n: usize,
    c: f64,
}

impl AnalyticField for ExpSum {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v.exp() + 0.5 * self.c * v * v).sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = v.exp() + self.c * v;
        }
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                out[k] = if i == j { x[i].exp() + self.c } else { 0.0 };
                k += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct RadialQuartic {
    n: usize,
    a: f64,
}

impl AnalyticField for RadialQuartic {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        0.5 * r2 + 0.25 * self.a * r2 * r2
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        for (o, v) in out.iter_mut().zip(x) {
            *o = v * (1.0 + self.a * r2);
        }
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                let diag = if i == j { 1.0 + self.a * r2 } else { 0.0 };
                out[k] = diag + 2.0 * self.a * x[i] * x[j];
                k += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_derivatives(a: &dyn AnalyticField, x: &[f64]) {
        let n = a.dim();
        let h = 1e-5;
        let mut g = vec![0.0; n];
        a.gradient(x, &mut g);
        let mut hs = vec![0.0; packed_len(n)];
        a.hessian(x, &mut hs);
        let mut xp = x.to_vec();
        for i in 0..n {
            xp[i] = x[i] + h;
            let fp = a.value(&xp);
            let mut gp = vec![0.0; n];
            a.gradient(&xp, &mut gp);
            xp[i] = x[i] - h;
            let fm = a.value(&xp);
            let mut gm = vec![0.0; n];
            a.gradient(&xp, &mut gm);
            xp[i] = x[i];
            assert!(((fp - fm) / (2.0 * h) - g[i]).abs() < 1e-8);
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert!((fd - hs[crate::field::packed_index(n, i, j)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let x = [0.3, -0.7, 0.45];
        for case in [
            Case::Quadratic {
                a: Some(vec![vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.1], vec![0.0, 0.1, 3.0]]),
            },
            Case::ParaboloidPerturbed { eps: 0.2 },
            Case::ExpSum { c: 0.5 },
            Case::RadialQuartic { a: 1.0 },
        ] {
            let a = case.exact(3).unwrap().unwrap();
            check_derivatives(a.as_ref(), &x);
        }
    }

    #[test]
    fn catalog_names_round_trip() {
        let c = Case::from_name("exp_sum", &serde_json::json!({"c": 1.0})).unwrap();
        assert_eq!(c, Case::ExpSum { c: 1.0 });
        assert_eq!(c.name(), "exp_sum");
        assert!(matches!(
            Case::from_name("cubic", &serde_json::Value::Null),
            Err(Error::UnknownCase(_))
        ));
        for name in CATALOG {
            let params = match name {
                "paraboloid_perturbed" => serde_json::json!({"eps": 0.1}),
                "f_oscillatory_family" => serde_json::json!({"k": 2}),
                _ => serde_json::Value::Null,
            };
            assert_eq!(Case::from_name(name, &params).unwrap().name(), name);
        }
    }

    #[test]
    fn exp_sum_rhs_is_pairwise_exponential() {
        let g = Grid::cube(3, 0.5, 0.125).unwrap();
        let m = manufactured_case(&Case::ExpSum { c: 0.0 }, &g, Variant::Hessian).unwrap();
        let mut x = vec![0.0; 3];
        for node in 0..g.len() {
            g.coords(node, &mut x);
            let want = (x[0] + x[1]).exp() + (x[0] + x[2]).exp() + (x[1] + x[2]).exp();
            assert!((m.f.at(node) - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn quadratic_identity_rhs_is_three() {
        let g = Grid::cube(3, 0.5, 0.125).unwrap();
        let m = manufactured_case(&Case::Quadratic { a: None }, &g, Variant::Hessian).unwrap();
        assert!(m.f.values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn curvature_rhs_of_paraboloid() {
        let g = Grid::cube(3, 0.5, 0.125).unwrap();
        let m = manufactured_case(&Case::Quadratic { a: None }, &g, Variant::Curvature).unwrap();
        let mut x = vec![0.0; 3];
        for node in 0..g.len() {
            g.coords(node, &mut x);
            let w2 = 1.0 + x.iter().map(|v| v * v).sum::<f64>();
            // κ = (1/W, 1/W, 1/W³)
            let want = 1.0 / w2 + 2.0 / (w2 * w2);
            assert!((m.f.at(node) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_convex_quadratic_rejected() {
        let g = Grid::cube(3, 0.5, 0.125).unwrap();
        let a = Some(vec![vec![1.0, 0.0, 0.0], vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(matches!(
            manufactured_case(&Case::Quadratic { a }, &g, Variant::Hessian),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn oscillatory_regularity_data() {
        let g = Grid::cube(3, 1.0, 1.0 / 16.0).unwrap();
        let m = manufactured_case(&Case::FOscillatoryFamily { k: 8.0 }, &g, Variant::Hessian).unwrap();
        assert_eq!(m.f_closed_form, Some(FClosedForm { lip: 0.5, c2: 4.0 }));
        assert!(m.f.values().iter().all(|&v| (0.9375..=1.0625).contains(&v)));
        let d2 = fd_hessian(&m.boundary);
        assert!((sigma2_packed(3, d2.at(g.origin_node())) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn certificate_examples() {
        let g = Grid::cube(3, 0.5, 0.125).unwrap();
        let full = RegionMask::full(&g);
        let u = ScalarField::from_fn(&g, |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>());
        let c = convexity_certificate(&u, &full).unwrap();
        assert!((c.min_eig - 1.0).abs() < 1e-10 && c.pass);
        let s = ScalarField::from_fn(&g, |x| x[0] * x[0] - x[1] * x[1]);
        let c = convexity_certificate(&s, &full).unwrap();
        assert!((c.min_eig + 2.0).abs() < 1e-10 && !c.pass);
    }

    #[test]
    fn solver_recovers_quadratic() {
        let g = Grid::cube(3, 0.5, 0.0625).unwrap();
        let case = Case::Quadratic {
            a: Some(vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]),
        };
        let m = manufactured_case(&case, &g, Variant::Hessian).unwrap();
        let sol = solve_dirichlet(&m.f, &m.boundary, &SolveOptions::default()).unwrap();
        let exact = &m.exact.unwrap().value;
        let err = solution_error(&sol.u, exact, &RegionMask::full(&g)).unwrap();
        assert!(err < 1e-10, "error {err}");
        assert!(sol.diag.convexity.pass);
        assert!(sol.diag.residual_history.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn degenerate_rhs_rejected() {
        let g = Grid::cube(3, 0.5, 0.125).unwrap();
        let f = ScalarField::from_fn(&g, |x| x[0] * x[0]);
        let b = ScalarField::constant(&g, 0.0);
        assert!(matches!(
            solve_dirichlet(&f, &b, &SolveOptions::default()),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn options_validation() {
        let mut o = SolveOptions::default();
        o.backtrack = 1.0;
        assert!(o.validate().is_err());
        o.backtrack = 0.5;
        o.residual_tol = 0.0;
        assert!(o.validate().is_err());
    }

    #[test]
    fn linearization_is_exact_directional_derivative() {
        let g = Grid::cube(3, 0.5, 0.0625).unwrap();
        let u = ScalarField::from_fn(&g, |x| x.iter().map(|v| v.exp()).sum::<f64>());
        let v = ScalarField::from_fn(&g, |x| (2.0 * x[0]).sin() * x[1] + x[2] * x[2] * x[0]);
        let c = linearization_check(&u, &v, 1e-3).unwrap();
        assert!(c.pass, "{c:?}");
    }
}
