//! `s2lab`: solve, verify and audit σ₂ problems from the command line.
//!
//! Exit status is 0 when every certificate of the command passes, 1 when one
//! fails, and 2 on errors.

mod expr;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use s2lab_core::audit::{run_full_pipeline, run_independence_experiment, write_manifest, AuditConfig};
use s2lab_core::barrier::{construct_curvature, construct_euclidean, normalize_solution, BarrierKind, GapOptions};
use s2lab_core::field::io::{load_scalar, save_scalar, Encoding};
use s2lab_core::field::{fd_laplacian, Derivatives, Grid, RegionMask, ScalarField};
use s2lab_core::geometry::build_graph_frame;
use s2lab_core::jacobi::{
    boundary_jacobi, richardson_check, trace_jacobi_curvature, trace_jacobi_hessian, CurvatureInput,
    HessianInput, JacobiReport, Variant,
};
use s2lab_core::moser::{
    base_case_mass, build_schedule, iteration_constants, schedule_with_k0, w2p_recursion_check, W2pInput,
};
use s2lab_core::solver::{
    convexity_certificate, manufactured_case, solution_error, solve_dirichlet, unknown_mask, Case,
    SolveOptions,
};

use expr::field_or_expression;

#[derive(Parser, Debug)]
#[command(name = "s2lab", version, about = "Finite-difference laboratory for sigma_2 equations")]
struct Cli {
    /// JSON configuration for the subcommand (solver, gap search or audit options).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; a manifest.json listing every file is written there.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// Grid spacing.
    #[arg(long, default_value_t = 0.0625)]
    h: f64,
    /// Half-width of the box `[-L, L]^n`.
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
}

impl GridArgs {
    fn grid(&self) -> Result<Grid> {
        Ok(Grid::cube(self.dim, self.half_width, self.h)?)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Newton solve of sigma_2(D^2 u) = f with Dirichlet data.
    Solve {
        /// Manufactured case from the catalog.
        #[arg(long, conflicts_with_all = ["f", "boundary"])]
        case: Option<String>,
        /// Case parameters as a JSON object.
        #[arg(long, default_value = "{}")]
        params: String,
        /// Right-hand side: FLD file or expression.
        #[arg(long, requires = "boundary")]
        f: Option<String>,
        /// Dirichlet data: FLD file or expression.
        #[arg(long, requires = "f")]
        boundary: Option<String>,
        #[command(flatten)]
        grid: GridArgs,
        /// Convexity is certified on this ball intersected with the unknowns.
        #[arg(long, default_value_t = 1.0)]
        certify_radius: f64,
    },
    /// Trace (and optionally boundary) Jacobi residual of a sampled solution.
    Jacobi {
        #[arg(long, default_value = "hessian")]
        variant: Variant,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
        #[arg(long)]
        u: PathBuf,
        /// FLD file or expression on the grid of `u`.
        #[arg(long)]
        f: String,
        /// Barrier samples; adds the boundary residual.
        #[arg(long)]
        w: Option<PathBuf>,
        /// 0/1 mask; defaults to nodes two layers inside the box.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Tube gap, barrier construction, certificate and the component Omega.
    Barrier {
        #[arg(long, default_value = "euclidean")]
        kind: BarrierKind,
        #[arg(long)]
        u: PathBuf,
        /// Right-hand side used for normalization (Euclidean kind); defaults to 1.
        #[arg(long)]
        f: Option<String>,
        /// Tube radius (Euclidean kind; the curvature kind derives it from M).
        #[arg(long, default_value_t = 0.5)]
        tube_radius: f64,
    },
    /// Exponent schedule and iteration constants for dimension n.
    Moser {
        #[arg(long)]
        dim: usize,
        /// Use this k0 instead of the smallest valid one.
        #[arg(long)]
        k0: Option<usize>,
    },
    /// W^{2,p} recursion ledger.
    W2p {
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        f: String,
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        omega: PathBuf,
        #[arg(long, default_value_t = 8)]
        pmax: usize,
        #[arg(long, default_value = "hessian")]
        variant: Variant,
        #[arg(long)]
        c_cap: Option<f64>,
    },
    /// End-to-end pipeline over a family sweep (independence audit for the oscillatory family).
    Audit {
        /// Run the independence assertions (implied for f_oscillatory_family).
        #[arg(long)]
        independence: bool,
    },
}

/// Collects written files for the manifest.
struct Outputs {
    dir: Option<PathBuf>,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(Outputs { dir, files: Vec::new() })
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            fs::write(&p, serde_json::to_string_pretty(value)?)?;
            self.files.push(p);
        }
        Ok(())
    }

    fn field(&mut self, name: &str, f: &ScalarField) -> Result<()> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            save_scalar(&p, f, Encoding::Text)?;
            self.files.push(p);
        }
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
            self.files.push(p);
        }
        Ok(())
    }

    fn finish(self, command: &str, pass: bool) -> Result<()> {
        if let Some(d) = &self.dir {
            write_manifest(d, command, pass, &self.files)?;
        }
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        // a closed pipe (`| head`) is not an error
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn solve(cli: &Cli, case: &Option<String>, params: &str, f: &Option<String>, boundary: &Option<String>, grid: &GridArgs, certify_radius: f64) -> Result<bool> {
    let opts: SolveOptions = match &cli.config {
        Some(p) => read_json(p)?,
        None => SolveOptions::default(),
    };
    let (f, b, exact, label) = match (case, f, boundary) {
        (Some(name), _, _) => {
            let params: serde_json::Value = serde_json::from_str(params).context("--params is not JSON")?;
            let c = Case::from_name(name, &params)?;
            let m = manufactured_case(&c, &grid.grid()?, Variant::Hessian)?;
            (m.f, m.boundary, m.exact.map(|d| d.value), json!(c))
        }
        (None, Some(fs), Some(bs)) => {
            // a file on either side fixes the grid
            let from_file = [fs, bs].into_iter().find(|s| Path::new(s.as_str()).is_file());
            let g = match from_file {
                Some(p) => load_scalar(p)?.grid().clone(),
                None => grid.grid()?,
            };
            let f = field_or_expression(fs, Some(&g))?;
            let b = field_or_expression(bs, Some(&g))?;
            (f, b, None, json!({ "f": fs, "boundary": bs }))
        }
        _ => bail!("give either --case or both --f and --boundary"),
    };
    let sol = solve_dirichlet(&f, &b, &opts)?;
    let g = sol.u.grid();
    let ball = RegionMask::ball(g, certify_radius).and(&unknown_mask(g))?;
    let cert = convexity_certificate(&sol.u, &ball)?;
    let err = match &exact {
        Some(e) => Some(solution_error(&sol.u, e, &RegionMask::full(g))?),
        None => None,
    };
    let mut out = Outputs::new(cli.out.clone())?;
    out.field("u.fld", &sol.u)?;
    let diag = json!({
        "problem": label,
        "spacing": g.spacing(),
        "diagnostics": sol.diag,
        "certificate": cert,
        "certify_radius": certify_radius,
        "laplacian_at_origin": fd_laplacian(&sol.u).at_origin(),
        "error_vs_exact": err,
    });
    out.json("diag.json", &diag)?;
    print(&json!({
        "iterations": sol.diag.iterations,
        "residual": sol.diag.residual_history.last(),
        "certificate": cert,
        "error_vs_exact": err,
    }))?;
    out.finish("solve", cert.pass)?;
    Ok(cert.pass)
}

fn jacobi_reports(
    variant: Variant,
    eps: f64,
    u: &ScalarField,
    f: &ScalarField,
    w: Option<&ScalarField>,
    mask: &RegionMask,
) -> Result<(JacobiReport, Option<JacobiReport>)> {
    Ok(match variant {
        Variant::Hessian => {
            let input = HessianInput::from_samples(u, f)?;
            let trace = trace_jacobi_hessian(&input, eps, None, mask)?;
            let bnd = match w {
                Some(w) => Some(boundary_jacobi(variant, Some(&input), None, &Derivatives::from_fd(w), None, mask)?),
                None => None,
            };
            (trace, bnd)
        }
        Variant::Curvature => {
            let input = CurvatureInput::from_samples(u, f)?;
            let trace = trace_jacobi_curvature(&input, eps, None, mask)?;
            let bnd = match w {
                Some(w) => Some(boundary_jacobi(variant, None, Some(&input), &Derivatives::from_fd(w), None, mask)?),
                None => None,
            };
            (trace, bnd)
        }
    })
}

fn jacobi(cli: &Cli, variant: Variant, eps: f64, u: &Path, f: &str, w: Option<&Path>, mask: Option<&Path>) -> Result<bool> {
    let u = load_scalar(u)?;
    let g = u.grid().clone();
    let f = field_or_expression(f, Some(&g))?;
    let w = w.map(load_scalar).transpose()?;
    let mask = match mask {
        Some(p) => RegionMask::from_indicator(&load_scalar(p)?)?,
        None => RegionMask::interior(&g, 2),
    };
    let (trace, bnd) = jacobi_reports(variant, eps, &u, &f, w.as_ref(), &mask)?;
    // Richardson estimate from the same data injected onto the 2h grid
    let coarse = (|| -> Result<_> {
        let cm = RegionMask::from_indicator(&mask.to_indicator().restrict()?)?;
        let cw = w.as_ref().map(|w| w.restrict()).transpose()?;
        jacobi_reports(variant, eps, &u.restrict()?, &f.restrict()?, cw.as_ref(), &cm)
    })();
    let h = g.spacing();
    let decompose = |fine: &JacobiReport, coarse: Option<&JacobiReport>| -> Result<serde_json::Value> {
        Ok(match coarse {
            Some(c) => {
                let r = richardson_check(c, fine)?;
                let tol = r.c_fd * h * h + 1e-8;
                json!({
                    "c_fd": r.c_fd,
                    "c_fd_h2": r.c_fd * h * h,
                    "floor": 1e-8,
                    "tolerance": tol,
                    "coarse_min_residual": c.min_residual,
                    "pass": fine.min_residual >= -tol && r.pass,
                })
            }
            None => json!({ "c_fd": null, "floor": 1e-8, "tolerance": 1e-8, "pass": fine.min_residual >= -1e-8 }),
        })
    };
    let (ct, cb) = match &coarse {
        Ok((t, b)) => (Some(t), b.as_ref()),
        Err(e) => {
            log::warn!("no Richardson estimate: {e:#}");
            (None, None)
        }
    };
    let trace_tol = decompose(&trace, ct)?;
    let mut pass = trace_tol["pass"].as_bool().unwrap_or(false);
    let mut report = json!({
        "trace": trace.summary(),
        "trace_tolerance": trace_tol,
    });
    if let Some(b) = &bnd {
        let bt = decompose(b, cb)?;
        pass &= bt["pass"].as_bool().unwrap_or(false);
        report["boundary"] = serde_json::to_value(b.summary())?;
        report["boundary_tolerance"] = bt;
    }
    report["pass"] = json!(pass);
    let mut out = Outputs::new(cli.out.clone())?;
    out.json("report.json", &report)?;
    out.field("residual.fld", &trace.residual)?;
    print(&report)?;
    out.finish("jacobi", pass)?;
    Ok(pass)
}

fn barrier(cli: &Cli, kind: BarrierKind, u: &Path, f: Option<&str>, tube_radius: f64) -> Result<bool> {
    let opts: GapOptions = match &cli.config {
        Some(p) => read_json(p)?,
        None => GapOptions::default(),
    };
    let u = load_scalar(u)?;
    let g = u.grid().clone();
    let (barrier, cert, omega, gap) = match kind {
        BarrierKind::Euclidean => {
            let f = match f {
                Some(s) => field_or_expression(s, Some(&g))?,
                None => ScalarField::constant(&g, 1.0),
            };
            let nz = normalize_solution(&u, &f)?;
            construct_euclidean(&nz.u_hat, tube_radius, &opts)?
        }
        BarrierKind::Curvature => construct_curvature(&u, &opts)?,
    };
    let mut out = Outputs::new(cli.out.clone())?;
    out.json("barrier.json", &barrier)?;
    out.json("certificate.json", &cert)?;
    out.json("gap.json", &gap)?;
    out.field("omega.fld", &omega.omega.to_indicator())?;
    out.field("phi.fld", &omega.phi)?;
    print(&json!({ "certificate": cert, "gap": gap.gap, "m": barrier.m, "r": barrier.r }))?;
    out.finish("barrier", cert.valid)?;
    Ok(cert.valid)
}

fn moser(cli: &Cli, dim: usize, k0: Option<usize>) -> Result<bool> {
    let s = match k0 {
        Some(k) => schedule_with_k0(dim, k)?,
        None => build_schedule(dim)?,
    };
    let c = iteration_constants(&s);
    let report = json!({ "schedule": s, "constants": c });
    let mut out = Outputs::new(cli.out.clone())?;
    out.json("schedule.json", &report)?;
    print(&report)?;
    let pass = s.checks.all() && c.within_caps;
    out.finish("moser", pass)?;
    Ok(pass)
}

#[allow(clippy::too_many_arguments)]
fn w2p(cli: &Cli, u: &Path, f: &str, phi: &Path, omega: &Path, pmax: usize, variant: Variant, c_cap: Option<f64>) -> Result<bool> {
    let u = load_scalar(u)?;
    let g = u.grid().clone();
    let f = field_or_expression(f, Some(&g))?;
    let phi = load_scalar(phi)?;
    let omega = RegionMask::from_indicator(&load_scalar(omega)?)?;
    let floor = match variant {
        Variant::Hessian => 1.0,
        Variant::Curvature => 0.0,
    };
    if let Some(node) = omega.nodes().find(|&n| f.at(n) < floor || f.at(n) <= 0.0) {
        bail!("f = {} at {:?} violates the hypothesis for the {variant:?} variant", f.at(node), g.coords_vec(node));
    }
    let d = Derivatives::from_fd(&u);
    let (a, area) = match variant {
        Variant::Hessian => (d.hessian.trace(), None),
        Variant::Curvature => {
            let frame = build_graph_frame(&d);
            (frame.mean.clone(), Some(frame.w.clone()))
        }
    };
    let ledger = w2p_recursion_check(
        &W2pInput { a: &a, phi: &phi, omega: &omega, area: area.as_ref() },
        pmax,
        c_cap,
    )?;
    let base = base_case_mass(&a, &d.gradient, &omega, area.as_ref())?;
    let report = json!({ "ledger": ledger, "base_case": base });
    let mut out = Outputs::new(cli.out.clone())?;
    out.json("ledger.json", &report)?;
    let rows: Vec<Vec<String>> = ledger
        .p
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                p.to_string(),
                format!("{:e}", ledger.i_p[i]),
                ledger.rho.get(i).map(|r| format!("{r:e}")).unwrap_or_default(),
            ]
        })
        .collect();
    out.csv("ledger.csv", &["p", "i_p", "rho_p"], &rows)?;
    print(&report)?;
    let pass = ledger.within_cap && ledger.factorial_envelope && base.pass;
    out.finish("w2p", pass)?;
    Ok(pass)
}

fn audit(cli: &Cli, independence: bool) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => AuditConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => bail!("audit needs --config <json>"),
    };
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    let report = if independence || cfg.family == "f_oscillatory_family" {
        run_independence_experiment(&cfg)?
    } else {
        run_full_pipeline(&cfg)?
    };
    print(&json!({
        "summary": report.summary,
        "independence": report.independence,
        "out_of_hypothesis": report.out_of_hypothesis,
        "pass": report.pass,
    }))?;
    Ok(report.pass)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Solve { case, params, f, boundary, grid, certify_radius } => {
            solve(cli, case, params, f, boundary, grid, *certify_radius)
        }
        Command::Jacobi { variant, eps, u, f, w, mask } => {
            jacobi(cli, *variant, *eps, u, f, w.as_deref(), mask.as_deref())
        }
        Command::Barrier { kind, u, f, tube_radius } => barrier(cli, *kind, u, f.as_deref(), *tube_radius),
        Command::Moser { dim, k0 } => moser(cli, *dim, *k0),
        Command::W2p { u, f, phi, omega, pmax, variant, c_cap } => {
            w2p(cli, u, f, phi, omega, *pmax, *variant, *c_cap)
        }
        Command::Audit { independence } => audit(cli, *independence),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("S2LAB_THREADS") {
        let n: usize = v.parse().with_context(|| format!("S2LAB_THREADS = `{v}` is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(&cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("s2lab: a certificate failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("s2lab: {e:#}");
            ExitCode::from(2)
        }
    }
}
