//! Cutting functions: tube gaps, closed-form 2-convex barriers, their
//! verification, and the component `Ω` of `{u < w}` through the origin.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    connected_component, fd_gradient, fd_hessian, packed_index, AnalyticField, Derivatives,
    RegionMask, ScalarField,
};
use crate::geometry::projection_and_conjugate;
use crate::jacobi::CutoffPhi;
use crate::sigma2::{cone_classify, sigma2_direct, sigma2_packed};

/// Tolerance for admitting a barrier Hessian into the closed Γ₂ cone.
pub const ADMISSION_TOL: f64 = 1e-12;

/// Fraction of the measured tube gap used as `δ`.
pub const DELTA_SHRINK: f64 = 0.9;

/// Default tube radius `1/(2n)`.
pub fn default_tube_radius(n: usize) -> f64 {
    1.0 / (2.0 * n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    /// `scale · (u − u(0) − x·Du(0))`
    pub u_hat: ScalarField,
    /// `scale² · f`
    pub f_hat: ScalarField,
    pub scale: f64,
    pub u0: f64,
    pub du0: Vec<f64>,
}

/// Subtracts the supporting affine function at 0 and rescales so `σ₂ ≥ 1`.
///
/// `scale = max(1, √‖f⁻¹‖_∞)`, using `σ₂(cS) = c²σ₂(S)`.
pub fn normalize_solution(u: &ScalarField, f: &ScalarField) -> Result<Normalized> {
    u.grid().ensure_same(f.grid())?;
    let min_f = f.values().iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_f > 0.0) {
        return Err(Error::Hypothesis(format!("min f = {min_f}, need f > 0")));
    }
    let grid = u.grid();
    let o = grid.origin_node();
    let du0 = fd_gradient(u).at(o).to_vec();
    let u0 = u.at(o);
    let scale = (1.0 / min_f).sqrt().max(1.0);
    let du = du0.clone();
    let mut x = vec![0.0; grid.dim()];
    let vals: Vec<f64> = (0..grid.len())
        .map(|node| {
            grid.coords(node, &mut x);
            let l = u0 + x.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>();
            scale * (u.at(node) - l)
        })
        .collect();
    let u_hat = ScalarField::new(grid.clone(), vals)?;
    let tol = 1e-8 * u_hat.max_abs().max(1.0);
    let min_hat = u_hat.values().iter().copied().fold(f64::INFINITY, f64::min);
    if min_hat < -tol {
        return Err(Error::Hypothesis(format!(
            "u lies below its supporting plane at 0 by {}; not convex",
            -min_hat
        )));
    }
    Ok(Normalized {
        f_hat: f.map(|v| v * scale * scale),
        u_hat,
        scale,
        u0,
        du0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    Euclidean,
    Curvature,
}

impl std::str::FromStr for BarrierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(BarrierKind::Euclidean),
            "curvature" => Ok(BarrierKind::Curvature),
            other => Err(Error::Config(format!("unknown barrier kind `{other}`"))),
        }
    }
}

/// `w(x) = a12|(y₁,y₂)|² + a_rest|(y₃,…,y_n)|² + constant + L(x)`, `y = R x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Barrier {
    pub kind: BarrierKind,
    pub dim: usize,
    pub delta: f64,
    pub m: Option<f64>,
    pub r: Option<f64>,
    /// Rows of the orthogonal matrix `R`.
    pub rotation: Vec<Vec<f64>>,
    /// `L(x) = support_value + x·support_gradient`; zero for the Euclidean kind.
    pub support_value: f64,
    pub support_gradient: Vec<f64>,
    pub a12: f64,
    pub a_rest: f64,
    pub constant: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn check_orthogonal(r: &DMatrix<f64>, n: usize) -> Result<()> {
    if r.nrows() != n || r.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: r.nrows(),
        });
    }
    let err = (r * r.transpose() - DMatrix::identity(n, n)).amax();
    if err > 1e-9 {
        return Err(Error::Hypothesis(format!(
            "rotation is not orthogonal (error {err:e})"
        )));
    }
    Ok(())
}

/// `w = δ[2(n−2)|(y₁,y₂)|² − |(y₃,…,y_n)|² + 1/8]`.
pub fn build_barrier_euclidean(delta: f64, n: usize, rotation: &DMatrix<f64>) -> Result<Barrier> {
    if n < 3 {
        return Err(Error::NotApplicable(format!(
            "the Euclidean barrier needs n >= 3, got {n}"
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Hypothesis(format!("delta = {delta} must be positive")));
    }
    check_orthogonal(rotation, n)?;
    Ok(Barrier {
        kind: BarrierKind::Euclidean,
        dim: n,
        delta,
        m: None,
        r: None,
        rotation: rows(rotation),
        support_value: 0.0,
        support_gradient: vec![0.0; n],
        a12: 2.0 * (n as f64 - 2.0) * delta,
        a_rest: -delta,
        constant: delta / 8.0,
    })
}

/// `w = δ[M|(y₁,y₂)|² − |(y₃,…,y_n)|² + 1/4] + L` with `r = √(1/(4(M+1)))`.
pub fn build_barrier_curvature(
    delta: f64,
    m: f64,
    support_value: f64,
    support_gradient: &[f64],
    rotation: &DMatrix<f64>,
) -> Result<Barrier> {
    let n = support_gradient.len();
    if n < 3 {
        return Err(Error::NotApplicable(format!(
            "the curvature barrier needs n >= 3, got {n}"
        )));
    }
    if !(delta > 0.0 && m > 0.0) {
        return Err(Error::Hypothesis(format!(
            "delta = {delta} and M = {m} must be positive"
        )));
    }
    check_orthogonal(rotation, n)?;
    Ok(Barrier {
        kind: BarrierKind::Curvature,
        dim: n,
        delta,
        m: Some(m),
        r: Some(curvature_radius(m)),
        rotation: rows(rotation),
        support_value,
        support_gradient: support_gradient.to_vec(),
        a12: m * delta,
        a_rest: -delta,
        constant: delta / 4.0,
    })
}

/// `r = √(1/(4(M+1)))`.
pub fn curvature_radius(m: f64) -> f64 {
    (1.0 / (4.0 * (m + 1.0))).sqrt()
}

impl Barrier {
    pub fn rotation_matrix(&self) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |i, j| self.rotation[i][j])
    }

    fn rotated(&self, x: &[f64], y: &mut [f64]) {
        for (i, row) in self.rotation.iter().enumerate() {
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `D²w` in `x` coordinates: `Rᵀ diag(2a12, 2a12, 2a_rest, …) R`.
    pub fn hessian_matrix(&self) -> DMatrix<f64> {
        let n = self.dim;
        let d = DMatrix::from_fn(n, n, |i, j| {
            if i != j {
                0.0
            } else if i < 2 {
                2.0 * self.a12
            } else {
                2.0 * self.a_rest
            }
        });
        let r = self.rotation_matrix();
        let h = r.transpose() * d * r;
        (&h + h.transpose()) * 0.5
    }

    /// Value at `y = R x` with the support plane removed.
    pub fn excess_at_y(&self, y: &[f64]) -> f64 {
        let p: f64 = y[..2].iter().map(|c| c * c).sum();
        let q: f64 = y[2..].iter().map(|c| c * c).sum();
        self.a12 * p + self.a_rest * q + self.constant
    }

    pub fn support_at(&self, x: &[f64]) -> f64 {
        self.support_value
            + self
                .support_gradient
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn sample(&self, grid: &crate::field::Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.value(x))
    }

    pub fn derivatives(&self, grid: &crate::field::Grid) -> Derivatives {
        Derivatives::from_analytic(grid, self)
    }
}

impl AnalyticField for Barrier {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut y = [0.0; 16];
        self.rotated(x, &mut y[..self.dim]);
        self.excess_at_y(&y[..self.dim]) + self.support_at(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim;
        let mut y = [0.0; 16];
        self.rotated(x, &mut y[..n]);
        // ∇w = Rᵀ (2a y) + ∇L
        out.copy_from_slice(&self.support_gradient);
        for (i, row) in self.rotation.iter().enumerate() {
            let a = if i < 2 { self.a12 } else { self.a_rest };
            for j in 0..n {
                out[j] += 2.0 * a * y[i] * row[j];
            }
        }
    }

    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        let h = self.hessian_matrix();
        let n = self.dim;
        for i in 0..n {
            for j in i..n {
                out[packed_index(n, i, j)] = h[(i, j)];
            }
        }
    }
}

/// Sample points of the tube wall `{|(y₁,y₂)| = r} ∩ B₁` and the cap `{|(y₁,y₂)| ≤ r} ∩ ∂B₁`.
#[derive(Clone, Debug)]
pub struct TubeSamples {
    pub dim: usize,
    pub radius: f64,
    pub wall: Vec<Vec<f64>>,
    pub cap: Vec<Vec<f64>>,
}

/// Odd count per axis keeping roughly `budget` points in a `d`-cube.
fn per_axis(d: usize, budget: usize) -> usize {
    let m = (budget as f64).powf(1.0 / d as f64).floor() as usize;
    let m = m.max(5);
    if m % 2 == 0 {
        m + 1
    } else {
        m
    }
}

/// Grid points of the closed ball of radius `s` in `d` dimensions.
fn ball_points(d: usize, s: f64, budget: usize) -> Vec<Vec<f64>> {
    if d == 0 {
        return vec![vec![]];
    }
    let m = per_axis(d, budget);
    let step = 2.0 * s / (m - 1) as f64;
    let total = m.pow(d as u32);
    let mut out = Vec::new();
    for k in 0..total {
        let mut rest = k;
        let mut p = Vec::with_capacity(d);
        for _ in 0..d {
            p.push(-s + (rest % m) as f64 * step);
            rest /= m;
        }
        if p.iter().map(|c| c * c).sum::<f64>() <= s * s * (1.0 + 1e-12) {
            out.push(p);
        }
    }
    out
}

/// Unit directions in `d` dimensions (projected cube-surface grid).
fn sphere_points(d: usize, budget: usize) -> Vec<Vec<f64>> {
    match d {
        0 => vec![vec![]],
        1 => vec![vec![1.0], vec![-1.0]],
        _ => {
            let m = per_axis(d, budget);
            let total = m.pow(d as u32);
            let mut out = Vec::new();
            for k in 0..total {
                let mut rest = k;
                let mut p = Vec::with_capacity(d);
                let mut on_face = false;
                for _ in 0..d {
                    let i = rest % m;
                    rest /= m;
                    on_face |= i == 0 || i == m - 1;
                    p.push(-1.0 + 2.0 * i as f64 / (m - 1) as f64);
                }
                if on_face {
                    let norm = p.iter().map(|c| c * c).sum::<f64>().sqrt();
                    out.push(p.into_iter().map(|c| c / norm).collect());
                }
            }
            out
        }
    }
}

impl TubeSamples {
    pub fn new(dim: usize, radius: f64) -> Result<Self> {
        if dim < 3 {
            return Err(Error::NotApplicable(format!("tubes need n >= 3, got {dim}")));
        }
        if !(radius > 0.0 && radius < 1.0) {
            return Err(Error::Config(format!("tube radius {radius} outside (0, 1)")));
        }
        let d = dim - 2;
        let thetas = 96;
        let angle = |k: usize| 2.0 * std::f64::consts::PI * k as f64 / thetas as f64;
        let mut wall = Vec::new();
        let s = (1.0 - radius * radius).sqrt();
        for z in ball_points(d, s, 1500) {
            for k in 0..thetas {
                let mut y = vec![radius * angle(k).cos(), radius * angle(k).sin()];
                y.extend_from_slice(&z);
                wall.push(y);
            }
        }
        let mut cap = Vec::new();
        let radii = 12;
        let dirs = sphere_points(d, 600);
        for ri in 0..=radii {
            let rho = radius * ri as f64 / radii as f64;
            let zr = (1.0 - rho * rho).sqrt();
            let nt = if ri == 0 { 1 } else { 48 };
            for k in 0..nt {
                let t = 2.0 * std::f64::consts::PI * k as f64 / nt as f64;
                for dir in &dirs {
                    let mut y = vec![rho * t.cos(), rho * t.sin()];
                    y.extend(dir.iter().map(|c| c * zr));
                    cap.push(y);
                }
            }
        }
        Ok(TubeSamples {
            dim,
            radius,
            wall,
            cap,
        })
    }
}

fn to_x(rotation: &DMatrix<f64>, y: &[f64], x: &mut [f64]) {
    let n = y.len();
    for j in 0..n {
        x[j] = (0..n).map(|i| rotation[(i, j)] * y[i]).sum();
    }
}

/// Minimum of `u_hat` over the rotated wall samples.
pub fn tube_minimum(u_hat: &ScalarField, rotation: &DMatrix<f64>, samples: &TubeSamples) -> Result<f64> {
    let n = samples.dim;
    let mut x = vec![0.0; n];
    let mut best = f64::INFINITY;
    for y in &samples.wall {
        to_x(rotation, y, &mut x);
        let v = u_hat.interpolate(&x).ok_or_else(|| {
            Error::Hypothesis("tube wall leaves the grid box; need B_1 inside the box".into())
        })?;
        best = best.min(v);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapOptions {
    pub random_candidates: usize,
    pub refine_rounds: usize,
    pub seed: u64,
}

impl Default for GapOptions {
    fn default() -> Self {
        GapOptions {
            random_candidates: 24,
            refine_rounds: 6,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeGap {
    pub rotation: Vec<Vec<f64>>,
    /// Measured `min û` on the tube wall.
    pub gap: f64,
    pub tube_radius: f64,
    pub evaluations: usize,
}

impl TubeGap {
    pub fn rotation_matrix(&self) -> DMatrix<f64> {
        let n = self.rotation.len();
        DMatrix::from_fn(n, n, |i, j| self.rotation[i][j])
    }
}

/// Orthogonal matrix whose first two rows are `e_i`, `e_j`.
fn axis_pair(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut order = vec![i, j];
    order.extend((0..n).filter(|&k| k != i && k != j));
    DMatrix::from_fn(n, n, |r, c| if order[r] == c { 1.0 } else { 0.0 })
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    q.transpose()
}

fn givens(n: usize, a: usize, b: usize, theta: f64) -> DMatrix<f64> {
    let mut m = DMatrix::identity(n, n);
    let (s, c) = theta.sin_cos();
    m[(a, a)] = c;
    m[(b, b)] = c;
    m[(a, b)] = -s;
    m[(b, a)] = s;
    m
}

/// Checks the gap-search hypotheses: `û(0) = 0`, `û ≥ 0`, `σ₂(D²û) ≥ 1` on `B₁`.
pub fn check_gap_hypotheses(u_hat: &ScalarField) -> Result<()> {
    let grid = u_hat.grid();
    let scale = u_hat.max_abs().max(1.0);
    if u_hat.at_origin().abs() > 1e-9 * scale {
        return Err(Error::Hypothesis(format!("u_hat(0) = {} != 0", u_hat.at_origin())));
    }
    if grid.inscribed_radius() < 1.0 - 1e-12 {
        return Err(Error::Hypothesis("grid box must contain B_1".into()));
    }
    let mask = RegionMask::ball(grid, 1.0).and(&RegionMask::interior(grid, 2))?;
    let d2 = fd_hessian(u_hat);
    let n = grid.dim();
    for node in mask.nodes() {
        if u_hat.at(node) < -1e-8 * scale {
            return Err(Error::Hypothesis(format!(
                "u_hat = {} < 0 at {:?}",
                u_hat.at(node),
                grid.coords_vec(node)
            )));
        }
        let s2 = sigma2_packed(n, d2.at(node));
        if s2 < 1.0 - 1e-6 {
            return Err(Error::Hypothesis(format!(
                "sigma_2(D^2 u_hat) = {s2} < 1 at {:?}",
                grid.coords_vec(node)
            )));
        }
    }
    Ok(())
}

/// Searches rotations maximizing the minimum of `û` on the tube wall.
pub fn find_tube_gap(u_hat: &ScalarField, tube_radius: f64, opts: &GapOptions) -> Result<TubeGap> {
    check_gap_hypotheses(u_hat)?;
    let n = u_hat.grid().dim();
    let samples = TubeSamples::new(n, tube_radius)?;
    let mut candidates = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            candidates.push(axis_pair(n, i, j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_candidates {
        candidates.push(random_orthogonal(n, &mut rng));
    }
    let scores: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|r| tube_minimum(u_hat, r, &samples))
        .collect();
    let mut evaluations = candidates.len();
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (k, s) in scores.into_iter().enumerate() {
        let s = s?;
        if s > best_val {
            best_val = s;
            best = k;
        }
    }
    let mut rot = candidates.swap_remove(best);

    // only rotations mixing the tube plane with its complement change the wall
    let mut step = 0.2;
    for _ in 0..opts.refine_rounds {
        let mut improved = true;
        while improved {
            improved = false;
            let trials: Vec<DMatrix<f64>> = (0..2)
                .flat_map(|a| (2..n).flat_map(move |b| [(a, b, 1.0), (a, b, -1.0)]))
                .map(|(a, b, sgn)| givens(n, a, b, sgn * step) * &rot)
                .collect();
            let vals: Vec<Result<f64>> = trials
                .par_iter()
                .map(|r| tube_minimum(u_hat, r, &samples))
                .collect();
            evaluations += trials.len();
            let mut pick = None;
            for (k, v) in vals.into_iter().enumerate() {
                let v = v?;
                if v > best_val + 1e-15 {
                    best_val = v;
                    pick = Some(k);
                }
            }
            if let Some(k) = pick {
                rot = trials[k].clone();
                improved = true;
            }
        }
        step *= 0.5;
    }
    if !(best_val > 1e-12) {
        return Err(Error::Hypothesis(format!(
            "best tube gap {best_val:e} is not positive"
        )));
    }
    Ok(TubeGap {
        rotation: rows(&rot),
        gap: best_val,
        tube_radius,
        evaluations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub pass: bool,
    /// Smallest measured slack; positive when the condition holds.
    pub margin: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierCertificate {
    pub kind: BarrierKind,
    /// `u(0) < w(0)`
    pub origin_inside: Condition,
    /// 2-convexity of `w` (Euclidean) or `σ₂(P D²w P) ≥ 0` (curvature).
    pub two_convex: Condition,
    /// `u > w` on the tube wall.
    pub wall: Condition,
    /// `u > w` on the outer cap.
    pub cap: Condition,
    /// Closed-form margins `1 − (M r² + 1/4)` and `−((M+1) r² + 1/4 − 3/4)` (curvature kind).
    pub closed_form_wall_margin: Option<f64>,
    pub closed_form_cap_margin: Option<f64>,
    pub tube_radius: f64,
    pub delta: f64,
    pub omega_nodes: Option<usize>,
    pub omega_inside_tube: Option<bool>,
    pub valid: bool,
}

/// Checks the four barrier conditions of `w` against `u` on the grid.
///
/// For the Euclidean kind `u` is the normalized `û`; for the curvature kind it
/// is the solution itself, whose supporting plane is stored in the barrier.
pub fn verify_barrier(u: &ScalarField, barrier: &Barrier, tube_radius: f64) -> Result<BarrierCertificate> {
    let grid = u.grid();
    let n = grid.dim();
    if n != barrier.dim {
        return Err(Error::DimensionMismatch {
            expected: barrier.dim,
            got: n,
        });
    }
    let w0 = barrier.value(&vec![0.0; n]);
    let u0 = u.at_origin();
    let origin_inside = Condition {
        pass: u0 < w0,
        margin: w0 - u0,
        detail: format!("u(0) = {u0:e}, w(0) = {w0:e}"),
    };

    let d2w = barrier.hessian_matrix();
    let two_convex = match barrier.kind {
        BarrierKind::Euclidean => {
            let c = cone_classify(&d2w, ADMISSION_TOL);
            Condition {
                pass: c.sigma1 > 0.0 && c.label.admissible(),
                margin: c.sigma2,
                detail: format!("sigma1 = {:e}, sigma2 = {:e}, {:?}", c.sigma1, c.sigma2, c.label),
            }
        }
        BarrierKind::Curvature => {
            let du = fd_gradient(u);
            let mask = RegionMask::ball(grid, 1.0);
            let mut worst = f64::INFINITY;
            let mut worst_s1 = f64::INFINITY;
            for node in mask.nodes() {
                let (_, hw) = projection_and_conjugate(du.at(node), &d2w);
                worst = worst.min(sigma2_direct(&hw));
                worst_s1 = worst_s1.min(hw.trace());
            }
            Condition {
                pass: worst >= -ADMISSION_TOL && worst_s1 > 0.0,
                margin: worst,
                detail: format!("min sigma2(P D2w P) = {worst:e}, min trace = {worst_s1:e} over B_1"),
            }
        }
    };

    let samples = TubeSamples::new(n, tube_radius)?;
    let rot = barrier.rotation_matrix();
    let mut x = vec![0.0; n];
    let mut slack = |pts: &[Vec<f64>]| -> Result<f64> {
        let mut m = f64::INFINITY;
        for y in pts {
            to_x(&rot, y, &mut x);
            let uv = u
                .interpolate(&x)
                .ok_or_else(|| Error::Hypothesis("tube samples leave the grid box".into()))?;
            m = m.min(uv - barrier.value(&x));
        }
        Ok(m)
    };
    let wall_m = slack(&samples.wall)?;
    let cap_m = slack(&samples.cap)?;
    let wall = Condition {
        pass: wall_m > 0.0,
        margin: wall_m,
        detail: format!("min (u - w) on {} wall samples", samples.wall.len()),
    };
    let cap = Condition {
        pass: cap_m > 0.0,
        margin: cap_m,
        detail: format!("min (u - w) on {} cap samples", samples.cap.len()),
    };
    let (cw, cc) = match (barrier.kind, barrier.m, barrier.r) {
        (BarrierKind::Curvature, Some(m), Some(r)) => (
            Some(1.0 - (m * r * r + 0.25)),
            Some(-((m + 1.0) * r * r + 0.25 - 0.75)),
        ),
        _ => (None, None),
    };
    let valid = origin_inside.pass && two_convex.pass && wall.pass && cap.pass;
    Ok(BarrierCertificate {
        kind: barrier.kind,
        origin_inside,
        two_convex,
        wall,
        cap,
        closed_form_wall_margin: cw,
        closed_form_cap_margin: cc,
        tube_radius,
        delta: barrier.delta,
        omega_nodes: None,
        omega_inside_tube: None,
        valid,
    })
}

/// Smallest power of two `M` with `σ₂(P D²w P) > 0` over `B₁` (support-free part only).
pub fn choose_m(u: &ScalarField, rotation: &DMatrix<f64>, max_power: u32) -> Result<f64> {
    let n = u.grid().dim();
    let du = fd_gradient(u);
    let mask = RegionMask::ball(u.grid(), 1.0);
    for k in 0..=max_power {
        let m = 2f64.powi(k as i32);
        let b = build_barrier_curvature(1.0, m, 0.0, &vec![0.0; n], rotation)?;
        let d2w = b.hessian_matrix();
        let ok = mask.nodes().all(|node| {
            let (_, hw) = projection_and_conjugate(du.at(node), &d2w);
            sigma2_direct(&hw) > 1e-12 && hw.trace() > 0.0
        });
        if ok {
            return Ok(m);
        }
    }
    Err(Error::Hypothesis(format!(
        "no M <= 2^{max_power} makes the barrier 2-convex on the graph"
    )))
}

#[derive(Clone, Debug)]
pub struct Omega {
    pub omega: RegionMask,
    /// `(w − u)⁴` on `Ω`, 0 elsewhere.
    pub phi: ScalarField,
    pub w: ScalarField,
}

/// Connected component of `{u < w}` through 0 and the cut-off field on it.
pub fn extract_omega(u: &ScalarField, barrier: &Barrier) -> Result<Omega> {
    let grid = u.grid();
    let w = barrier.sample(grid);
    let below = RegionMask::less_than(u, &w)?;
    let o = grid.origin_node();
    if !below.contains(o) {
        return Err(Error::Hypothesis("0 is not in {u < w}".into()));
    }
    let omega = connected_component(&below, o)?;
    let phi = ScalarField::new(
        grid.clone(),
        (0..grid.len())
            .map(|node| {
                if omega.contains(node) {
                    CutoffPhi::value(w.at(node) - u.at(node))
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    Ok(Omega { omega, phi, w })
}

/// Whether every node of `Ω` lies in the open tube `{|(y₁,y₂)| < r} ∩ B₁`.
pub fn omega_inside_tube(omega: &RegionMask, barrier: &Barrier, tube_radius: f64) -> bool {
    let grid = omega.grid();
    let n = grid.dim();
    let mut y = vec![0.0; n];
    omega.nodes().all(|node| {
        let x = grid.coords_vec(node);
        barrier.rotated(&x, &mut y);
        let p = (y[0] * y[0] + y[1] * y[1]).sqrt();
        let r: f64 = x.iter().map(|c| c * c).sum::<f64>().sqrt();
        p < tube_radius && r < 1.0
    })
}

/// Euclidean construction: gap search, `δ = 0.9·gap`, verification and `Ω`.
pub fn construct_euclidean(
    u_hat: &ScalarField,
    tube_radius: f64,
    opts: &GapOptions,
) -> Result<(Barrier, BarrierCertificate, Omega, TubeGap)> {
    let gap = find_tube_gap(u_hat, tube_radius, opts)?;
    let n = u_hat.grid().dim();
    let barrier = build_barrier_euclidean(DELTA_SHRINK * gap.gap, n, &gap.rotation_matrix())?;
    let mut cert = verify_barrier(u_hat, &barrier, tube_radius)?;
    let omega = extract_omega(u_hat, &barrier)?;
    let inside = omega_inside_tube(&omega.omega, &barrier, tube_radius);
    cert.omega_nodes = Some(omega.omega.count());
    cert.omega_inside_tube = Some(inside);
    cert.valid &= inside;
    Ok((barrier, cert, omega, gap))
}

/// Curvature construction: `M` first, then `r(M)`, the gap at `r`, and verification.
pub fn construct_curvature(
    u: &ScalarField,
    opts: &GapOptions,
) -> Result<(Barrier, BarrierCertificate, Omega, TubeGap)> {
    let grid = u.grid();
    let n = grid.dim();
    let o = grid.origin_node();
    let du0 = fd_gradient(u).at(o).to_vec();
    let u0 = u.at(o);
    let hat = ScalarField::from_fn(grid, |x| x.iter().zip(&du0).map(|(a, b)| a * b).sum::<f64>())
        .zip_map(u, |l, v| v - u0 - l)?;
    // the graph σ₂ condition is scale free, so the gap search only needs û ≥ 0 with σ₂ > 0
    let d2 = fd_hessian(&hat);
    let min_s2 = RegionMask::ball(grid, 1.0)
        .and(&RegionMask::interior(grid, 2))?
        .nodes()
        .map(|node| sigma2_packed(n, d2.at(node)))
        .fold(f64::INFINITY, f64::min);
    if !(min_s2 > 0.0) {
        return Err(Error::Hypothesis(format!("min sigma_2(D^2 u) = {min_s2} on B_1")));
    }
    let scaled = hat.map(|v| v / min_s2.sqrt());
    let probe = find_tube_gap(&scaled, 0.25, opts)?;
    let m = choose_m(u, &probe.rotation_matrix(), 20)?;
    let r = curvature_radius(m);
    let mut gap = find_tube_gap(&scaled, r, opts)?;
    gap.gap *= min_s2.sqrt();
    let barrier = build_barrier_curvature(DELTA_SHRINK * gap.gap, m, u0, &du0, &gap.rotation_matrix())?;
    let mut cert = verify_barrier(u, &barrier, r)?;
    let omega = extract_omega(u, &barrier)?;
    let inside = omega_inside_tube(&omega.omega, &barrier, r);
    cert.omega_nodes = Some(omega.omega.count());
    cert.omega_inside_tube = Some(inside);
    cert.valid &= inside;
    Ok((barrier, cert, omega, gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;

    fn half_square(g: &Grid) -> ScalarField {
        ScalarField::from_fn(g, |x| 0.5 * x.iter().map(|c| c * c).sum::<f64>())
    }

    #[test]
    fn normalization_examples() {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let u = half_square(&g);
        let nz = normalize_solution(&u, &ScalarField::constant(&g, 3.0)).unwrap();
        assert_eq!(nz.scale, 1.0);
        assert_eq!(nz.u_hat, u);
        let half = u.map(|v| 0.5 * v);
        let nz = normalize_solution(&half, &ScalarField::constant(&g, 0.75)).unwrap();
        assert!((nz.scale - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(nz.f_hat.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let affine = ScalarField::from_fn(&g, |x| x[0]);
        assert!(normalize_solution(&affine, &ScalarField::constant(&g, 0.0)).is_err());
    }

    #[test]
    fn euclidean_closed_forms() {
        let r = DMatrix::identity(4, 4);
        let b = build_barrier_euclidean(1.0, 4, &r).unwrap();
        assert!((sigma2_direct(&b.hessian_matrix()) - 4.0).abs() < 1e-12);
        let b3 = build_barrier_euclidean(1.0, 3, &DMatrix::identity(3, 3)).unwrap();
        let c = cone_classify(&b3.hessian_matrix(), ADMISSION_TOL);
        assert_eq!(c.sigma2, 0.0);
        assert_eq!(c.label, crate::sigma2::ConeLabel::Weakly2Convex);
        assert!(build_barrier_euclidean(1.0, 2, &DMatrix::identity(2, 2)).is_err());
        assert_eq!(b3.value(&[0.0; 3]), 1.0 / 8.0);
    }

    #[test]
    fn curvature_radius_identity() {
        for m in [1.0, 4.0, 10.0, 1024.0] {
            let r = curvature_radius(m);
            assert!(((m + 1.0) * r * r - 0.25).abs() < 1e-15);
        }
        assert!((curvature_radius(10.0) - (1.0f64 / 44.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn analytic_derivatives_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rot = random_orthogonal(3, &mut rng);
        let b = build_barrier_curvature(0.3, 4.0, 0.1, &[0.2, -0.1, 0.05], &rot).unwrap();
        let g = Grid::cube(3, 1.0, 0.25).unwrap();
        let d = b.derivatives(&g);
        let fd = Derivatives::from_fd(&b.sample(&g));
        for (a, c) in d.gradient.values().iter().zip(fd.gradient.values()) {
            assert!((a - c).abs() < 1e-12);
        }
        for (a, c) in d.hessian.values().iter().zip(fd.hessian.values()) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn paraboloid_gap_is_radially_symmetric() {
        let g = Grid::cube(3, 1.0, 1.0 / 16.0).unwrap();
        let u = half_square(&g);
        let r = default_tube_radius(3);
        let gap = find_tube_gap(&u, r, &GapOptions::default()).unwrap();
        // interpolation of a quadratic overshoots by at most h²/8 per axis
        assert!((gap.gap - r * r / 2.0).abs() < 1.0 / 256.0 / 8.0 * 3.0 + 1e-12);
    }

    #[test]
    fn degenerate_u_is_rejected() {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let u = ScalarField::from_fn(&g, |x| x[0] * x[0]);
        assert!(matches!(
            find_tube_gap(&u, 1.0 / 6.0, &GapOptions::default()),
            Err(Error::Hypothesis(_))
        ));
    }
}
