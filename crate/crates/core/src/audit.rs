//! End-to-end pipeline and the Lipschitz-versus-C² independence audit.
//!
//! Each family member is solved (or sampled, for the curvature variant),
//! certified convex, normalized, given a barrier and a component `Ω`, and then
//! run through the Jacobi, W^{2,p} and C^{1,1} stages at every configured
//! spacing. Members that fail a hypothesis are listed separately.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{
    construct_curvature, construct_euclidean, normalize_solution, BarrierCertificate, GapOptions,
};
use crate::error::{Error, Result};
use crate::field::io::{save_scalar, Encoding};
use crate::field::{fd_hessian, fd_laplacian, lipschitz_norm, Grid, RegionMask, ScalarField};
use crate::jacobi::{
    boundary_jacobi, richardson_check, trace_jacobi_curvature, trace_jacobi_hessian, CurvatureInput,
    HessianInput, JacobiReport, JacobiSummary, RichardsonCheck, Variant,
};
use crate::moser::{
    base_case_mass, build_schedule, c11_comparison, iteration_constants, w2p_recursion_check,
    within_fraction, BaseCaseMass, C11Comparison, IterationConstants, MoserSchedule, RecursionLedger,
    W2pInput,
};
use crate::solver::{
    convexity_certificate, manufactured_case, solution_error, solve_dirichlet, unknown_mask, Case,
    ConvexityCertificate, InitialGuess, SolveOptions, CATALOG,
};

/// Default bound on `max Δu(0) / min Δu(0)` across a sweep.
pub const DEFAULT_SPREAD_TOL: f64 = 1.2;
/// Default relative tolerance for refinement stability of `max ρ_p` and the C^{1,1} ratio.
pub const DEFAULT_STABILITY_TOL: f64 = 0.25;
/// Default lower bound on the C² proxy ratio in the independence audit.
pub const DEFAULT_C2_RATIO_MIN: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub dim: usize,
    /// Half-width of the box `[−L, L]^n`.
    pub half_width: f64,
    /// Spacings, coarse to fine.
    pub h: Vec<f64>,
    pub family: String,
    /// One parameter object per member.
    pub sweep: Vec<serde_json::Value>,
    pub variant: Variant,
    pub epsilon: f64,
    pub tube_radius: f64,
    pub p_max: usize,
    /// Cap on `ρ_p`; `None` uses ten times the measured `ρ₁`.
    pub c_cap: Option<f64>,
    /// Radius of the ball on which convexity is certified.
    pub certify_radius: f64,
    pub spread_tol: f64,
    pub stability_tol: f64,
    pub c2_ratio_min: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Also write `u` for every run.
    pub save_fields: bool,
    pub solve: SolveOptions,
    pub gap: GapOptions,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            dim: 3,
            half_width: 1.0,
            h: vec![1.0 / 16.0, 1.0 / 32.0],
            family: "quadratic".into(),
            sweep: vec![serde_json::json!({})],
            variant: Variant::Hessian,
            epsilon: 0.5,
            tube_radius: 0.5,
            p_max: 8,
            c_cap: None,
            certify_radius: 1.0,
            spread_tol: DEFAULT_SPREAD_TOL,
            stability_tol: DEFAULT_STABILITY_TOL,
            c2_ratio_min: DEFAULT_C2_RATIO_MIN,
            seed: 0x5eed,
            out: None,
            save_fields: false,
            solve: SolveOptions::default(),
            gap: GapOptions::default(),
        }
    }
}

impl AuditConfig {
    /// The independence sweep `k ∈ {1, 2, 4, …, 64}` at one or more spacings.
    pub fn independence(h: Vec<f64>) -> Self {
        AuditConfig {
            h,
            family: "f_oscillatory_family".into(),
            sweep: (0..7).map(|i| serde_json::json!({ "k": (1u32 << i) as f64 })).collect(),
            ..AuditConfig::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: AuditConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim < 3 {
            return bad(format!("dim = {} < 3", self.dim));
        }
        if self.h.len() < 2 {
            return bad("at least two spacings are needed for refinement checks".into());
        }
        if self.h.iter().any(|&h| !(h > 0.0)) {
            return bad("spacings must be positive".into());
        }
        if self.h.windows(2).any(|w| w[1] >= w[0]) {
            return bad("spacings must decrease".into());
        }
        if self.sweep.is_empty() {
            return bad("empty sweep".into());
        }
        if !CATALOG.contains(&self.family.as_str()) {
            return Err(Error::UnknownCase(self.family.clone()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon = {} outside (0,1)", self.epsilon));
        }
        if !(self.tube_radius > 0.0 && self.tube_radius < 1.0) {
            return bad(format!("tube_radius = {} outside (0,1)", self.tube_radius));
        }
        if self.p_max < 2 {
            return bad(format!("p_max = {} < 2", self.p_max));
        }
        if !(self.spread_tol >= 1.0) {
            return bad(format!("spread_tol = {} < 1", self.spread_tol));
        }
        if !(self.half_width >= 1.0) {
            return bad(format!("half_width = {} < 1; the estimate ball B_1 must fit", self.half_width));
        }
        self.solve.validate()
    }

    fn cases(&self) -> Result<Vec<Case>> {
        self.sweep.iter().map(|p| Case::from_name(&self.family, p)).collect()
    }
}

/// Scalar label for a sweep entry: its first numeric parameter, else its index.
fn param_scalar(v: &serde_json::Value, index: usize) -> f64 {
    v.as_object()
        .and_then(|m| m.values().find_map(|x| x.as_f64()))
        .unwrap_or(index as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub final_residual: f64,
    pub initial_guess: InitialGuess,
    pub error_vs_exact: Option<f64>,
}

/// One member at one spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub h: f64,
    pub lip_f: f64,
    pub c2_proxy: f64,
    pub c2_closed_form: Option<f64>,
    pub solve: Option<SolveSummary>,
    pub convexity: ConvexityCertificate,
    /// Smallest Hessian eigenvalue over all unknowns, corners included.
    pub box_min_eig: f64,
    /// `Δu(0)` or `H(0)`.
    pub center_value: f64,
    pub scale: f64,
    pub barrier: BarrierCertificate,
    pub trace_jacobi: JacobiSummary,
    pub boundary_jacobi: JacobiSummary,
    pub ledger: RecursionLedger,
    pub base_case: BaseCaseMass,
    pub c11: C11Comparison,
    pub certified: bool,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub index: usize,
    pub param: f64,
    pub params: serde_json::Value,
    pub runs: Vec<RunRecord>,
    /// Consecutive spacing pairs.
    pub trace_richardson: Vec<RichardsonCheck>,
    pub boundary_richardson: Vec<RichardsonCheck>,
    pub rho_stable: bool,
    pub c11_stable: bool,
    pub certified: bool,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutOfHypothesis {
    pub index: usize,
    pub param: f64,
    pub params: serde_json::Value,
    pub h: Option<f64>,
    pub reason: String,
    /// Solver non-convergence rather than a violated hypothesis.
    pub incomplete: bool,
}

/// Flat CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub param: f64,
    pub h: f64,
    pub lip_f: f64,
    pub c2_proxy: f64,
    pub delta: f64,
    pub center_value: f64,
    pub min_trace_jacobi: f64,
    pub min_boundary_jacobi: f64,
    pub max_rho: f64,
    pub c11_ratio: f64,
    pub convex: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub h: f64,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub spreads: Vec<Spread>,
    pub max_lip: f64,
    /// Max over min of the C² proxy at the finest spacing.
    pub c2_ratio: f64,
    pub members: usize,
    pub certified: usize,
    pub out_of_hypothesis: usize,
    pub complete: bool,
    pub all_certificates_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceSummary {
    pub h: f64,
    pub lip_bound: f64,
    pub lip_ok: bool,
    pub c2_ratio: f64,
    pub c2_ratio_min: f64,
    pub c2_ok: bool,
    pub spread: f64,
    pub spread_tol: f64,
    pub spread_ok: bool,
    pub all_certified: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub schedule: MoserSchedule,
    pub constants: IterationConstants,
    pub members: Vec<MemberReport>,
    pub rows: Vec<Row>,
    pub out_of_hypothesis: Vec<OutOfHypothesis>,
    pub summary: AuditSummary,
    pub independence: Option<IndependenceSummary>,
    pub pass: bool,
}

/// Everything kept in memory for one run; the Jacobi fields feed Richardson checks.
struct Run {
    record: RunRecord,
    trace: JacobiReport,
    boundary: JacobiReport,
    u: ScalarField,
}

enum RunOutcome {
    Done(Box<Run>),
    Out { reason: String, incomplete: bool },
}

fn classify(e: &Error) -> bool {
    // true when the failure is numerical rather than a hypothesis
    let inner = match e {
        Error::Stage { source, .. } => source.as_ref(),
        other => other,
    };
    matches!(inner, Error::NoConvergence { .. } | Error::LinearSolve(_))
}

fn run_member_at(cfg: &AuditConfig, case: &Case, h: f64) -> Result<RunOutcome> {
    let grid = Grid::cube(cfg.dim, cfg.half_width, h).map_err(|e| e.at_stage("grid"))?;
    let m = match manufactured_case(case, &grid, cfg.variant) {
        Ok(m) => m,
        Err(e @ Error::Hypothesis(_)) => {
            return Ok(RunOutcome::Out {
                reason: e.to_string(),
                incomplete: false,
            })
        }
        Err(e) => return Err(e.at_stage("manufacture")),
    };
    let interior = RegionMask::interior(&grid, 1);
    let lip_f = lipschitz_norm(&m.f, &interior)?.lip;
    let d2f = fd_hessian(&m.f);
    let c2_proxy = interior
        .nodes()
        .flat_map(|node| d2f.at(node).iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);

    let (u, solve) = match cfg.variant {
        Variant::Hessian => match solve_dirichlet(&m.f, &m.boundary, &cfg.solve) {
            Ok(sol) => {
                let err = match &m.exact {
                    Some(d) => Some(solution_error(&sol.u, &d.value, &RegionMask::full(&grid))?),
                    None => None,
                };
                let summary = SolveSummary {
                    iterations: sol.diag.iterations,
                    final_residual: *sol.diag.residual_history.last().expect("nonempty history"),
                    initial_guess: sol.diag.initial_guess,
                    error_vs_exact: err,
                };
                (sol.u, Some(summary))
            }
            Err(e) => {
                return Ok(RunOutcome::Out {
                    incomplete: classify(&e),
                    reason: e.at_stage("solve").to_string(),
                })
            }
        },
        // curvature-side checks run on the sampled manufactured graph
        Variant::Curvature => (
            m.exact.as_ref().expect("closed-form curvature case").value.clone(),
            None,
        ),
    };
    let cert_mask = RegionMask::ball(&grid, cfg.certify_radius).and(&unknown_mask(&grid))?;
    let convexity = convexity_certificate(&u, &cert_mask)?;
    let box_min_eig = convexity_certificate(&u, &unknown_mask(&grid))?.min_eig;
    if !convexity.pass {
        return Ok(RunOutcome::Out {
            reason: format!(
                "convexity certificate failed on B_{}: min eigenvalue {:e}",
                cfg.certify_radius, convexity.min_eig
            ),
            incomplete: false,
        });
    }

    let opts = GapOptions {
        seed: cfg.seed,
        ..cfg.gap.clone()
    };
    let schedule = build_schedule(cfg.dim)?;
    let mut failures = Vec::new();
    let (record_parts, trace, boundary) = match cfg.variant {
        Variant::Hessian => {
            let nz = normalize_solution(&u, &m.f).map_err(|e| e.at_stage("normalize"))?;
            let (barrier, cert, omega, _) = construct_euclidean(&nz.u_hat, cfg.tube_radius, &opts)
                .map_err(|e| e.at_stage("barrier"))?;
            let input = HessianInput::from_samples(&nz.u_hat, &nz.f_hat)?;
            let trace = trace_jacobi_hessian(&input, cfg.epsilon, None, &omega.omega)
                .map_err(|e| e.at_stage("jacobi"))?;
            let boundary = boundary_jacobi(
                Variant::Hessian,
                Some(&input),
                None,
                &barrier.derivatives(&grid),
                None,
                &omega.omega,
            )
            .map_err(|e| e.at_stage("boundary jacobi"))?;
            let a = &input.lap.value;
            let ledger = w2p_recursion_check(
                &W2pInput {
                    a,
                    phi: &omega.phi,
                    omega: &omega.omega,
                    area: None,
                },
                cfg.p_max,
                cfg.c_cap,
            )
            .map_err(|e| e.at_stage("w2p"))?;
            let base = base_case_mass(a, &input.u.gradient, &omega.omega, None)
                .map_err(|e| e.at_stage("base case"))?;
            let c11 = c11_comparison(a, &omega.phi, &schedule, None).map_err(|e| e.at_stage("c11"))?;
            let center = fd_laplacian(&u).at_origin();
            ((nz.scale, cert, ledger, base, c11, center), trace, boundary)
        }
        Variant::Curvature => {
            let (barrier, cert, omega, _) =
                construct_curvature(&u, &opts).map_err(|e| e.at_stage("barrier"))?;
            let input = CurvatureInput::from_samples(&u, &m.f)?;
            let trace = trace_jacobi_curvature(&input, cfg.epsilon, None, &omega.omega)
                .map_err(|e| e.at_stage("jacobi"))?;
            let boundary = boundary_jacobi(
                Variant::Curvature,
                None,
                Some(&input),
                &barrier.derivatives(&grid),
                None,
                &omega.omega,
            )
            .map_err(|e| e.at_stage("boundary jacobi"))?;
            let a = &input.mean.value;
            let w = &input.frame.w;
            let ledger = w2p_recursion_check(
                &W2pInput {
                    a,
                    phi: &omega.phi,
                    omega: &omega.omega,
                    area: Some(w),
                },
                cfg.p_max,
                cfg.c_cap,
            )
            .map_err(|e| e.at_stage("w2p"))?;
            let base = base_case_mass(a, &input.frame.u.gradient, &omega.omega, Some(w))
                .map_err(|e| e.at_stage("base case"))?;
            let c11 = c11_comparison(a, &omega.phi, &schedule, Some(w)).map_err(|e| e.at_stage("c11"))?;
            let center = a.at_origin();
            ((1.0, cert, ledger, base, c11, center), trace, boundary)
        }
    };
    let (scale, barrier, ledger, base_case, c11, center_value) = record_parts;
    if !barrier.valid {
        failures.push("barrier certificate".to_string());
    }
    if !(ledger.within_cap && ledger.factorial_envelope && ledger.rho.iter().all(|r| r.is_finite())) {
        failures.push("w2p ledger".to_string());
    }
    if !base_case.pass {
        failures.push("base-case mass bound".to_string());
    }
    if !(c11.ratio.is_finite()) {
        failures.push("c11 ratio".to_string());
    }
    let record = RunRecord {
        h,
        lip_f,
        c2_proxy,
        c2_closed_form: m.f_closed_form.map(|c| c.c2),
        solve,
        convexity,
        box_min_eig,
        center_value,
        scale,
        barrier,
        trace_jacobi: trace.summary(),
        boundary_jacobi: boundary.summary(),
        ledger,
        base_case,
        c11,
        certified: failures.is_empty(),
        failures,
    };
    Ok(RunOutcome::Done(Box::new(Run {
        record,
        trace,
        boundary,
        u,
    })))
}

enum MemberOutcome {
    Member(MemberReport, Vec<ScalarField>),
    Out(OutOfHypothesis),
}

fn run_member(cfg: &AuditConfig, index: usize, case: &Case) -> Result<MemberOutcome> {
    let params = cfg.sweep[index].clone();
    let param = param_scalar(&params, index);
    let mut runs = Vec::new();
    for &h in &cfg.h {
        match run_member_at(cfg, case, h)? {
            RunOutcome::Done(run) => runs.push(*run),
            RunOutcome::Out { reason, incomplete } => {
                log::warn!("member {index} (param {param}) at h = {h}: {reason}");
                return Ok(MemberOutcome::Out(OutOfHypothesis {
                    index,
                    param,
                    params,
                    h: Some(h),
                    reason,
                    incomplete,
                }));
            }
        }
    }
    let mut failures: Vec<String> = Vec::new();
    let mut trace_richardson = Vec::new();
    let mut boundary_richardson = Vec::new();
    let mut rho_stable = true;
    let mut c11_stable = true;
    for pair in runs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let halved = (a.record.h - 2.0 * b.record.h).abs() <= 1e-12 * a.record.h;
        if halved {
            let t = richardson_check(&a.trace, &b.trace)?;
            let bd = richardson_check(&a.boundary, &b.boundary)?;
            // the fine run must also respect the tolerance scaled to its own spacing
            let fine_ok = |c: &RichardsonCheck, r: &JacobiReport| {
                r.min_residual >= -(c.c_fd * b.record.h * b.record.h + 1e-8)
            };
            if !(t.pass && fine_ok(&t, &b.trace)) {
                failures.push(format!("trace Jacobi at h = {}", a.record.h));
            }
            if !(bd.pass && fine_ok(&bd, &b.boundary)) {
                failures.push(format!("boundary Jacobi at h = {}", a.record.h));
            }
            trace_richardson.push(t);
            boundary_richardson.push(bd);
        } else {
            log::info!("spacings {} and {} are not a halving; Richardson skipped", a.record.h, b.record.h);
        }
        rho_stable &= within_fraction(a.record.ledger.max_rho, b.record.ledger.max_rho, cfg.stability_tol);
        c11_stable &= within_fraction(a.record.c11.ratio, b.record.c11.ratio, cfg.stability_tol);
    }
    if !rho_stable {
        failures.push("max rho_p not stable under refinement".into());
    }
    if !c11_stable {
        failures.push("C^{1,1} ratio not stable under refinement".into());
    }
    for r in &runs {
        for f in &r.record.failures {
            failures.push(format!("{f} at h = {}", r.record.h));
        }
    }
    let fields = if cfg.save_fields {
        runs.iter().map(|r| r.u.clone()).collect()
    } else {
        Vec::new()
    };
    Ok(MemberOutcome::Member(
        MemberReport {
            index,
            param,
            params,
            certified: failures.is_empty(),
            runs: runs.into_iter().map(|r| r.record).collect(),
            trace_richardson,
            boundary_richardson,
            rho_stable,
            c11_stable,
            failures,
        },
        fields,
    ))
}

fn summarize(cfg: &AuditConfig, members: &[MemberReport], out: &[OutOfHypothesis]) -> AuditSummary {
    let spreads = cfg
        .h
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let vals: Vec<f64> = members.iter().map(|m| m.runs[i].center_value).collect();
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Spread {
                h,
                min,
                max,
                spread: if vals.is_empty() { 1.0 } else { max / min },
            }
        })
        .collect();
    let finest = cfg.h.len() - 1;
    let proxies: Vec<f64> = members.iter().map(|m| m.runs[finest].c2_proxy).collect();
    let c2_max = proxies.iter().copied().fold(0.0, f64::max);
    let c2_min = proxies.iter().copied().fold(f64::INFINITY, f64::min);
    AuditSummary {
        spreads,
        max_lip: members
            .iter()
            .flat_map(|m| m.runs.iter().map(|r| r.lip_f))
            .fold(0.0, f64::max),
        c2_ratio: if proxies.is_empty() || c2_min == 0.0 { 0.0 } else { c2_max / c2_min },
        members: members.len() + out.len(),
        certified: members.iter().filter(|m| m.certified).count(),
        out_of_hypothesis: out.len(),
        complete: !out.iter().any(|o| o.incomplete),
        all_certificates_pass: members.iter().all(|m| m.certified),
    }
}

fn rows_of(members: &[MemberReport]) -> Vec<Row> {
    members
        .iter()
        .flat_map(|m| {
            m.runs.iter().map(move |r| Row {
                param: m.param,
                h: r.h,
                lip_f: r.lip_f,
                c2_proxy: r.c2_proxy,
                delta: r.barrier.delta,
                center_value: r.center_value,
                min_trace_jacobi: r.trace_jacobi.min_residual,
                min_boundary_jacobi: r.boundary_jacobi.min_residual,
                max_rho: r.ledger.max_rho,
                c11_ratio: r.c11.ratio,
                convex: r.convexity.pass,
            })
        })
        .collect()
}

/// Runs every stage for every member and spacing; writes artifacts when `config.out` is set.
pub fn run_full_pipeline(config: &AuditConfig) -> Result<AuditReport> {
    let (report, fields) = pipeline(config)?;
    if let Some(dir) = &config.out {
        write_artifacts(&report, &fields, dir)?;
    }
    Ok(report)
}

fn pipeline(config: &AuditConfig) -> Result<(AuditReport, Vec<(usize, Vec<ScalarField>)>)> {
    config.validate()?;
    let schedule = build_schedule(config.dim)?;
    let constants = iteration_constants(&schedule);
    let cases = config.cases()?;
    let outcomes: Vec<Result<MemberOutcome>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| run_member(config, i, case))
        .collect();
    let mut members = Vec::new();
    let mut out = Vec::new();
    let mut fields = Vec::new();
    for o in outcomes {
        match o? {
            MemberOutcome::Member(m, f) => {
                if !f.is_empty() {
                    fields.push((m.index, f));
                }
                members.push(m);
            }
            MemberOutcome::Out(o) => out.push(o),
        }
    }
    let summary = summarize(config, &members, &out);
    let pass = summary.complete && summary.all_certificates_pass && schedule.checks.all() && constants.within_caps;
    Ok((
        AuditReport {
            config: config.clone(),
            schedule,
            constants,
            rows: rows_of(&members),
            members,
            out_of_hypothesis: out,
            summary,
            independence: None,
            pass,
        },
        fields,
    ))
}

/// The pipeline on the oscillatory family plus the independence assertions at the finest spacing.
pub fn run_independence_experiment(config: &AuditConfig) -> Result<AuditReport> {
    if config.family != "f_oscillatory_family" {
        return Err(Error::Config(format!(
            "independence audit needs family f_oscillatory_family, got {}",
            config.family
        )));
    }
    let (mut report, fields) = pipeline(config)?;
    let finest = config.h.len() - 1;
    let lip_bound = 0.5;
    let s = &report.summary;
    let spread = s.spreads[finest].spread;
    let lip_ok = report
        .members
        .iter()
        .all(|m| m.runs.iter().all(|r| r.lip_f <= lip_bound + 1e-12));
    let all_certified = report.out_of_hypothesis.is_empty() && s.all_certificates_pass;
    let ind = IndependenceSummary {
        h: config.h[finest],
        lip_bound,
        lip_ok,
        c2_ratio: s.c2_ratio,
        c2_ratio_min: config.c2_ratio_min,
        c2_ok: s.c2_ratio >= config.c2_ratio_min,
        spread,
        spread_tol: config.spread_tol,
        spread_ok: spread <= config.spread_tol,
        all_certified,
        pass: false,
    };
    let ind = IndependenceSummary {
        pass: ind.lip_ok && ind.c2_ok && ind.spread_ok && ind.all_certified,
        ..ind
    };
    report.pass &= ind.pass;
    report.independence = Some(ind);
    if let Some(dir) = &config.out {
        write_artifacts(&report, &fields, dir)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Plot,
}

/// Writes the requested report files into `dir`; returns their paths.
pub fn emit_reports(report: &AuditReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => {
                let p = dir.join("report.json");
                fs::write(&p, serde_json::to_string_pretty(report)?)?;
                written.push(p);
            }
            ReportFormat::Csv => {
                let p = dir.join("rows.csv");
                let mut w = csv::Writer::from_path(&p)?;
                for r in &report.rows {
                    w.serialize(r)?;
                }
                w.flush()?;
                written.push(p);
            }
            ReportFormat::Plot => {
                let p = dir.join("plot_center.csv");
                let mut w = csv::Writer::from_path(&p)?;
                w.write_record(["param", "h", "center_value", "c2_proxy", "lip_f"])?;
                for r in &report.rows {
                    w.write_record([
                        r.param.to_string(),
                        r.h.to_string(),
                        r.center_value.to_string(),
                        r.c2_proxy.to_string(),
                        r.lip_f.to_string(),
                    ])?;
                }
                w.flush()?;
                written.push(p);
                let p = dir.join("plot_rho.csv");
                let mut w = csv::Writer::from_path(&p)?;
                w.write_record(["param", "h", "p", "rho"])?;
                for m in &report.members {
                    for r in &m.runs {
                        for (i, rho) in r.ledger.rho.iter().enumerate() {
                            w.write_record([
                                m.param.to_string(),
                                r.h.to_string(),
                                (i + 1).to_string(),
                                rho.to_string(),
                            ])?;
                        }
                    }
                }
                w.flush()?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<AuditReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub pass: bool,
    pub defaults: serde_json::Value,
    pub files: Vec<ManifestEntry>,
}

/// Records every file under `dir` (except the manifest itself) in `manifest.json`.
pub fn write_manifest(dir: &Path, command: &str, pass: bool, files: &[PathBuf]) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        entries.push(ManifestEntry {
            path: rel.to_string_lossy().into_owned(),
            bytes: fs::metadata(f)?.len(),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        tool: "s2lab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        pass,
        defaults: serde_json::json!({
            "spread_tol": DEFAULT_SPREAD_TOL,
            "stability_tol": DEFAULT_STABILITY_TOL,
            "c2_ratio_min": DEFAULT_C2_RATIO_MIN,
            "solve": SolveOptions::default(),
            "gap": GapOptions::default(),
        }),
        files: entries,
    };
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest)?)?;
    Ok(p)
}

/// Report files, one stage file per run, optional fields, and the manifest.
fn write_artifacts(report: &AuditReport, fields: &[(usize, Vec<ScalarField>)], dir: &Path) -> Result<()> {
    let mut files = emit_reports(report, &[ReportFormat::Json, ReportFormat::Csv, ReportFormat::Plot], dir)?;
    let runs = dir.join("runs");
    fs::create_dir_all(&runs)?;
    for m in &report.members {
        for (i, r) in m.runs.iter().enumerate() {
            let p = runs.join(format!("member{:02}_h{}.json", m.index, i));
            fs::write(&p, serde_json::to_string_pretty(r)?)?;
            files.push(p);
            if let Some((_, fs_)) = fields.iter().find(|(idx, _)| *idx == m.index) {
                let p = runs.join(format!("member{:02}_h{}_u.fld", m.index, i));
                save_scalar(&p, &fs_[i], Encoding::Binary)?;
                files.push(p);
            }
        }
    }
    let p = dir.join("schedule.json");
    fs::write(&p, serde_json::to_string_pretty(&report.schedule)?)?;
    files.push(p);
    write_manifest(dir, "audit", report.pass, &files)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        let mut c = AuditConfig::default();
        assert!(c.validate().is_ok());
        c.h = vec![1.0 / 16.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.h = vec![1.0 / 16.0, 1.0 / 32.0];
        c.sweep.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.sweep = vec![serde_json::json!({})];
        c.family = "cubic".into();
        assert!(matches!(c.validate(), Err(Error::UnknownCase(_))));
    }

    #[test]
    fn config_json_defaults() {
        let c: AuditConfig = serde_json::from_str(r#"{"family": "exp_sum", "sweep": [{"c": 0.5}]}"#).unwrap();
        assert_eq!(c.dim, 3);
        assert_eq!(c.spread_tol, DEFAULT_SPREAD_TOL);
        assert!(serde_json::from_str::<AuditConfig>(r#"{"dimension": 3}"#).is_err());
    }

    #[test]
    fn independence_sweep_is_powers_of_two() {
        let c = AuditConfig::independence(vec![1.0 / 16.0, 1.0 / 32.0]);
        let ks: Vec<f64> = c.sweep.iter().enumerate().map(|(i, v)| param_scalar(v, i)).collect();
        assert_eq!(ks, vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]);
    }
}
