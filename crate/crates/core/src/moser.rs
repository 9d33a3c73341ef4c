//! Integral machinery: the W^{2,p} recursion ledger, the Moser exponent
//! schedule, the p = 1 base case and the sup-versus-integral comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{integrate, node_weight, RegionMask, ScalarField, VectorField};

/// Exponent and radius sequences for the iteration in dimension `n ≥ 3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoserSchedule {
    pub n: usize,
    pub gamma: f64,
    pub k0: usize,
    /// Smallest integer `k ≥ ln n / ln γ`.
    pub minimal_k0: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub checks: ScheduleChecks,
    /// Why `k0` differs from `minimal_k0`, if it does.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleChecks {
    pub p_above_n: bool,
    pub q_at_least_2: bool,
    pub ratio_at_most_2n: bool,
    pub p_end_at_most_n_plus_1: bool,
    pub q_end_at_least_n: bool,
    pub r_end_below_1: bool,
}

impl ScheduleChecks {
    pub fn all(&self) -> bool {
        self.p_above_n
            && self.q_at_least_2
            && self.ratio_at_most_2n
            && self.p_end_at_most_n_plus_1
            && self.q_end_at_least_n
            && self.r_end_below_1
    }

    fn failures(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.p_above_n {
            v.push("p_k > n");
        }
        if !self.q_at_least_2 {
            v.push("q_k >= 2");
        }
        if !self.ratio_at_most_2n {
            v.push("q_k/p_k <= 2n");
        }
        if !self.p_end_at_most_n_plus_1 {
            v.push("p_k0 <= n+1");
        }
        if !self.q_end_at_least_n {
            v.push("q_k0 >= n");
        }
        if !self.r_end_below_1 {
            v.push("r_k0 < 1");
        }
        v
    }
}

fn gamma_of(n: usize) -> Result<f64> {
    match n {
        0 | 1 => Err(Error::Config(format!("dimension {n} < 2"))),
        2 => Err(Error::NotApplicable(
            "n = 2 needs no iteration (Sobolev embedding)".into(),
        )),
        _ => Ok(n as f64 / (n as f64 - 2.0)),
    }
}

/// Sequences for a given `k0`, checked but not repaired.
pub fn schedule_with_k0(n: usize, k0: usize) -> Result<MoserSchedule> {
    let gamma = gamma_of(n)?;
    let nf = n as f64;
    let mut p = vec![gamma.powi(k0 as i32)];
    let mut q = vec![2.0 * nf * p[0]];
    for k in 1..=k0 {
        p.push(p[k - 1] / gamma + 2.0);
        q.push(q[k - 1] / gamma - 2.0);
    }
    let r: Vec<f64> = (0..=k0)
        .map(|k| {
            0.5 + (1..=k)
                .map(|i| 2f64.powi(-((k0 - i + 2) as i32)))
                .sum::<f64>()
        })
        .collect();
    let checks = ScheduleChecks {
        p_above_n: p.iter().all(|&v| v > nf),
        q_at_least_2: q.iter().all(|&v| v >= 2.0),
        ratio_at_most_2n: p.iter().zip(&q).all(|(a, b)| b / a <= 2.0 * nf * (1.0 + 1e-15)),
        p_end_at_most_n_plus_1: p[k0] <= nf + 1.0,
        q_end_at_least_n: q[k0] >= nf,
        r_end_below_1: r[k0] < 1.0,
    };
    Ok(MoserSchedule {
        n,
        gamma,
        k0,
        minimal_k0: minimal_k0(n)?,
        p,
        q,
        r,
        checks,
        note: None,
    })
}

/// Smallest integer `k ≥ ln n / ln γ`, computed without rounding drift.
pub fn minimal_k0(n: usize) -> Result<usize> {
    let gamma = gamma_of(n)?;
    let mut k = 0;
    // γ^k ≥ n, compared in integers: n^k ≥ n (n−2)^k
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    while num < n as u128 * den {
        k += 1;
        num *= n as u128;
        den *= (n - 2) as u128;
        if k > 64 {
            return Err(Error::Config(format!("no k0 found for n = {n} (gamma {gamma})")));
        }
    }
    Ok(k)
}

/// Smallest `k0 ≥ ln n/ln γ` for which every schedule invariant holds strictly.
pub fn build_schedule(n: usize) -> Result<MoserSchedule> {
    let k_min = minimal_k0(n)?;
    let mut k0 = k_min;
    let mut first_failures = None;
    loop {
        let s = schedule_with_k0(n, k0)?;
        if s.checks.all() {
            let mut s = s;
            if k0 != k_min {
                s.note = Some(format!(
                    "minimal k0 = {k_min} violates {}; incremented to k0 = {k0}",
                    first_failures.unwrap_or_default()
                ));
            }
            return Ok(s);
        }
        if first_failures.is_none() {
            first_failures = Some(s.checks.failures().join(", "));
        }
        k0 += 1;
        if k0 > k_min + 32 {
            return Err(Error::Config(format!("no valid schedule for n = {n}")));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationConstants {
    /// `γ^{-k0} Σ_{k=1}^{k0} γ^k`
    pub sum_a: f64,
    /// `γ^{-k0} Σ_{k=1}^{k0} (k0−k) γ^k`
    pub sum_b: f64,
    /// `γ^{-k0} Σ_{k=1}^{k0} 4 γ^k ln(p_k − 2)`
    pub product_log: f64,
    /// `γ²/(γ−1)² + γ/(γ−1)`
    pub cap: f64,
    /// `4 ln n · γ/(γ−1) + 4 ln γ · γ/(γ−1)²`
    pub product_cap: f64,
    pub within_caps: bool,
}

pub fn iteration_constants(s: &MoserSchedule) -> IterationConstants {
    let g = s.gamma;
    let k0 = s.k0;
    let norm = g.powi(-(k0 as i32));
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut product_log = 0.0;
    for k in 1..=k0 {
        let gk = g.powi(k as i32);
        sum_a += gk;
        sum_b += (k0 - k) as f64 * gk;
        product_log += 4.0 * gk * (s.p[k] - 2.0).ln();
    }
    sum_a *= norm;
    sum_b *= norm;
    product_log *= norm;
    let cap = g * g / ((g - 1.0) * (g - 1.0)) + g / (g - 1.0);
    let product_cap =
        4.0 * (s.n as f64).ln() * g / (g - 1.0) + 4.0 * g.ln() * g / ((g - 1.0) * (g - 1.0));
    IterationConstants {
        within_caps: sum_a <= cap && sum_b <= cap && product_log <= product_cap,
        sum_a,
        sum_b,
        product_log,
        cap,
        product_cap,
    }
}

/// Integrand pieces of the W^{2,p} ledger.
#[derive(Clone, Debug)]
pub struct W2pInput<'a> {
    /// `Δu` (Hessian variant) or `H` (curvature variant).
    pub a: &'a ScalarField,
    pub phi: &'a ScalarField,
    pub omega: &'a RegionMask,
    /// Area element `W` for the curvature variant; `None` integrates `dx`.
    pub area: Option<&'a ScalarField>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionLedger {
    pub p: Vec<usize>,
    /// `ln I_p`; `-inf` is stored as `None`.
    pub log_i: Vec<Option<f64>>,
    pub i_p: Vec<f64>,
    /// `ρ_p = I_{p+1} / (p I_p)` for `p = 1..p_max−1`.
    pub rho: Vec<f64>,
    pub max_rho: f64,
    pub min_rho: f64,
    pub c_cap: f64,
    pub within_cap: bool,
    pub factorial_envelope: bool,
    pub spacing: f64,
    pub omega_nodes: usize,
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn ln_factorial(p: usize) -> f64 {
    (2..=p).map(|k| (k as f64).ln()).sum()
}

/// `I_p = ∫_Ω A^p φ^{p−1}` for `p = 1..=p_max`, accumulated in log domain.
///
/// `c_cap` bounds every `ρ_p`; `None` uses ten times `ρ₁`.
pub fn w2p_recursion_check(input: &W2pInput<'_>, p_max: usize, c_cap: Option<f64>) -> Result<RecursionLedger> {
    let grid = input.a.grid();
    grid.ensure_same(input.phi.grid())?;
    grid.ensure_same(input.omega.grid())?;
    if p_max < 2 {
        return Err(Error::Config(format!("p_max = {p_max} < 2")));
    }
    let mut nodes = Vec::new();
    for node in input.omega.nodes() {
        let a = input.a.at(node);
        let phi = input.phi.at(node);
        if !(a > 0.0) {
            return Err(Error::Hypothesis(format!(
                "integrand base {a} <= 0 at {:?}",
                grid.coords_vec(node)
            )));
        }
        if phi < 0.0 {
            return Err(Error::Hypothesis("negative cut-off".into()));
        }
        if phi > 0.0 {
            let mut lw = (node_weight(grid, node) * grid.cell_volume()).ln();
            if let Some(w) = input.area {
                lw += w.at(node).ln();
            }
            nodes.push((lw, a.ln(), phi.ln()));
        }
    }
    let mut log_i = Vec::with_capacity(p_max);
    let mut terms = vec![0.0; nodes.len()];
    for p in 1..=p_max {
        for (t, &(lw, la, lp)) in terms.iter_mut().zip(&nodes) {
            *t = lw + p as f64 * la + (p - 1) as f64 * lp;
        }
        log_i.push(log_sum_exp(&terms));
    }
    let mut rho = Vec::with_capacity(p_max - 1);
    for p in 1..p_max {
        let (a, b) = (log_i[p - 1], log_i[p]);
        rho.push(if a == f64::NEG_INFINITY {
            0.0
        } else {
            (b - a - (p as f64).ln()).exp()
        });
    }
    let max_rho = rho.iter().copied().fold(0.0, f64::max);
    let min_rho = rho.iter().copied().fold(f64::INFINITY, f64::min);
    let c_cap = c_cap.unwrap_or(10.0 * rho[0]);
    let within_cap = rho.iter().all(|&r| r <= c_cap);
    let factorial_envelope = if log_i[0] == f64::NEG_INFINITY || max_rho == 0.0 {
        true
    } else {
        (1..=p_max).all(|p| {
            let env = ln_factorial(p) + (p - 1) as f64 * max_rho.ln() + log_i[0];
            log_i[p - 1] <= env + 1e-12 * env.abs().max(1.0)
        })
    };
    Ok(RecursionLedger {
        p: (1..=p_max).collect(),
        i_p: log_i.iter().map(|l| l.exp()).collect(),
        log_i: log_i
            .iter()
            .map(|&l| (l > f64::NEG_INFINITY).then_some(l))
            .collect(),
        rho,
        max_rho,
        min_rho,
        c_cap,
        within_cap,
        factorial_envelope,
        spacing: grid.spacing(),
        omega_nodes: input.omega.count(),
    })
}

/// Smooth radial bump: 1 on `|x| ≤ inner`, 0 on `|x| ≥ outer`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub inner: f64,
    pub outer: f64,
}

fn psi(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

fn dpsi(t: f64) -> f64 {
    if t > 0.0 {
        psi(t) / (t * t)
    } else {
        0.0
    }
}

impl Bump {
    fn t(&self, r: f64) -> f64 {
        (self.outer - r) / (self.outer - self.inner)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let t = self.t(x.iter().map(|c| c * c).sum::<f64>().sqrt());
        psi(t) / (psi(t) + psi(1.0 - t))
    }

    /// `|Dφ̂|` at `x`.
    pub fn gradient_norm(&self, x: &[f64]) -> f64 {
        let t = self.t(x.iter().map(|c| c * c).sum::<f64>().sqrt());
        let (a, b) = (psi(t), psi(1.0 - t));
        if a + b == 0.0 {
            return 0.0;
        }
        let ds = (dpsi(t) * b + a * dpsi(1.0 - t)) / ((a + b) * (a + b));
        ds / (self.outer - self.inner)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseCaseMass {
    pub mass: f64,
    pub bound: f64,
    pub bump: Bump,
    pub pass: bool,
}

/// `∫_mask A` against the divergence bound `2 ∫ |Dφ̂||Du|`, with `φ̂` a radial bump equal
/// to 1 on the mask and vanishing at the inscribed radius of the box.
///
/// Hessian variant: `mass = ∫ Δu dx`. Curvature variant (`area = Some(W)`):
/// `mass = ∫ H W dx` and the bound is `max W · 2∫ |Dφ̂||Du|/W dx`, since `H = div(Du/W)`.
pub fn base_case_mass(
    a: &ScalarField,
    du: &VectorField,
    mask: &RegionMask,
    area: Option<&ScalarField>,
) -> Result<BaseCaseMass> {
    let grid = a.grid();
    grid.ensure_same(du.grid())?;
    let mut reach = 0.0f64;
    for node in mask.nodes() {
        if !(a.at(node) > 0.0) {
            return Err(Error::Hypothesis(format!(
                "integrand {} <= 0 at {:?}",
                a.at(node),
                grid.coords_vec(node)
            )));
        }
        let x = grid.coords_vec(node);
        reach = reach.max(x.iter().map(|c| c * c).sum::<f64>().sqrt());
    }
    let outer = grid.inscribed_radius();
    let inner = reach + grid.spacing();
    if !(outer - inner > 2.0 * grid.spacing()) {
        return Err(Error::Hypothesis(format!(
            "no room for a cut-off between radius {inner} and the box ({outer})"
        )));
    }
    let bump = Bump { inner, outer };
    let norms = du.norms();
    let (integrand, mass_field, wmax) = match area {
        None => (
            ScalarField::from_fn(grid, |x| bump.gradient_norm(x)).zip_map(&norms, |b, g| b * g)?,
            a.clone(),
            1.0,
        ),
        Some(w) => {
            let wmax = mask.nodes().map(|n| w.at(n)).fold(1.0, f64::max);
            let gw = norms.zip_map(w, |g, w| g / w)?;
            (
                ScalarField::from_fn(grid, |x| bump.gradient_norm(x)).zip_map(&gw, |b, g| b * g)?,
                a.zip_map(w, |h, w| h * w)?,
                wmax,
            )
        }
    };
    let mass = integrate(&mass_field, mask)?.value;
    let bound = wmax * 2.0 * integrate(&integrand, &RegionMask::full(grid))?.value;
    Ok(BaseCaseMass {
        mass,
        bound,
        bump,
        pass: mass <= bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct C11Comparison {
    /// `max_{B_{1/2}} φ^{2n} A`
    pub lhs: f64,
    /// `∫_{B₁} φⁿ A^{n+1}` (times `W` for the curvature variant)
    pub rhs: f64,
    pub ratio: f64,
}

pub fn c11_comparison(
    a: &ScalarField,
    phi: &ScalarField,
    schedule: &MoserSchedule,
    area: Option<&ScalarField>,
) -> Result<C11Comparison> {
    let grid = a.grid();
    grid.ensure_same(phi.grid())?;
    let n = grid.dim();
    if schedule.n != n {
        return Err(Error::DimensionMismatch {
            expected: schedule.n,
            got: n,
        });
    }
    let half = RegionMask::ball(grid, 0.5);
    let lhs = half
        .nodes()
        .map(|node| phi.at(node).powi(2 * n as i32) * a.at(node))
        .fold(0.0, f64::max);
    let one = RegionMask::ball(grid, 1.0);
    let integrand = ScalarField::new(
        grid.clone(),
        (0..grid.len())
            .map(|node| {
                let v = phi.at(node).powi(n as i32) * a.at(node).max(0.0).powi(n as i32 + 1);
                match area {
                    Some(w) => v * w.at(node),
                    None => v,
                }
            })
            .collect(),
    )?;
    let rhs = integrate(&integrand, &one)?.value;
    if rhs == 0.0 && lhs > 0.0 {
        return Err(Error::Hypothesis(
            "integral side vanishes while the sup side does not".into(),
        ));
    }
    Ok(C11Comparison {
        lhs,
        rhs,
        ratio: if rhs == 0.0 { 0.0 } else { lhs / rhs },
    })
}

/// `|a/b − 1| ≤ tol`, treating two zeros as equal.
pub fn within_fraction(a: f64, b: f64, tol: f64) -> bool {
    if a == 0.0 && b == 0.0 {
        return true;
    }
    (a / b - 1.0).abs() <= tol
}
