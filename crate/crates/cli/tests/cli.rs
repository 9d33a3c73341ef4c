use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn s2lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2lab"))
        .args(args)
        .current_dir(cwd)
        .env("S2LAB_THREADS", "1")
        .output()
        .expect("spawn s2lab")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn moser_reports_schedule_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s2lab(&["moser", "--dim", "4"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["schedule"]["k0"], 3);
    assert_eq!(v["schedule"]["minimal_k0"], 2);
    assert_eq!(v["constants"]["within_caps"], true);

    // an explicit k0 that breaks p_k > n is reported, not corrected
    let out = s2lab(&["moser", "--dim", "3", "--k0", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = s2lab(&["moser", "--dim", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n = 2"));
}

#[test]
fn solve_barrier_w2p_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = s2lab(&["--out", "s", "solve", "--case", "quadratic", "--h", "0.125"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert!(v["error_vs_exact"].as_f64().unwrap() < 1e-10);

    let manifest = read_json(&d.join("s/manifest.json"));
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["pass"], true);
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    for f in files {
        let p = d.join("s").join(f["path"].as_str().unwrap());
        assert_eq!(fs::metadata(&p).unwrap().len(), f["bytes"].as_u64().unwrap());
    }

    let out = s2lab(&["--out", "b", "barrier", "--u", "s/u.fld"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cert = read_json(&d.join("b/certificate.json"));
    assert_eq!(cert["valid"], true);
    for name in ["barrier.json", "gap.json", "omega.fld", "phi.fld"] {
        assert!(d.join("b").join(name).is_file(), "{name}");
    }

    // u = |x|²/2 has σ₂(D²u) = 3
    let out = s2lab(
        &["--out", "w", "w2p", "--u", "s/u.fld", "--f", "3", "--phi", "b/phi.fld", "--omega", "b/omega.fld"],
        d,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("w/ledger.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("p,i_p,rho_p"));
    assert_eq!(lines.count(), 8);

    let out = s2lab(&["--out", "j", "jacobi", "--u", "s/u.fld", "--f", "3", "--w", "b/phi.fld"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = read_json(&d.join("j/report.json"));
    assert_eq!(rep["pass"], true);
    assert!(rep["trace_tolerance"]["c_fd"].is_number());
}

#[test]
fn expressions_match_the_catalog_case() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let params = r#"{"a": [[1, 0, 0], [0, 2, 0], [0, 0, 3]]}"#;
    let out = s2lab(&["--out", "c", "solve", "--case", "quadratic", "--params", params, "--h", "0.125"], d);
    assert_eq!(out.status.code(), Some(0));
    // σ₂ of diag(1, 2, 3) is 11
    let out = s2lab(
        &["--out", "e", "solve", "--f", "11", "--boundary", "0.5*x*x + y*y + 1.5*z*z", "--h", "0.125"],
        d,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read_to_string(d.join("c/u.fld")).unwrap();
    let b = fs::read_to_string(d.join("e/u.fld")).unwrap();
    let parse = |s: &str| -> Vec<f64> {
        s.lines().skip(1).flat_map(|l| l.split_whitespace()).map(|t| t.parse().unwrap()).collect()
    };
    let (a, b) = (parse(&a), parse(&b));
    assert!(!a.is_empty() && a.len() == b.len());
    let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "max difference {err}");
}

#[test]
fn hypothesis_violations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = s2lab(&["--out", "s", "solve", "--case", "quadratic", "--h", "0.125"], d);
    assert_eq!(out.status.code(), Some(0));
    // f = 1/2 is below the f ≥ 1 floor of the Hessian variant
    let out = s2lab(&["jacobi", "--u", "s/u.fld", "--f", "0.5"], d);
    assert_eq!(out.status.code(), Some(2));
    let out = s2lab(&["solve", "--case", "no_such_case"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn audit_config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(s2lab(&["audit"], d).status.code(), Some(2));
    fs::write(d.join("bogus.json"), r#"{"bogus": 1}"#).unwrap();
    let out = s2lab(&["--config", "bogus.json", "audit"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    fs::write(d.join("inc.json"), r#"{"h": [0.0625, 0.125]}"#).unwrap();
    assert_eq!(s2lab(&["--config", "inc.json", "audit"], d).status.code(), Some(2));
}

#[test]
fn quadratic_audit_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.json"), r#"{"h": [0.0625, 0.03125]}"#).unwrap();
    let out = s2lab(&["--config", "a.json", "--out", "a", "audit"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["pass"], true);
    let manifest = read_json(&d.join("a/manifest.json"));
    let names: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap())
        .collect();
    for want in ["report.json", "rows.csv", "plot_center.csv", "plot_rho.csv", "schedule.json"] {
        assert!(names.iter().any(|n| n.ends_with(want)), "{want} missing from {names:?}");
    }
    let report = read_json(&d.join("a/report.json"));
    assert_eq!(report["summary"]["members"], 1);
}
