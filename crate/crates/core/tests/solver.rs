use proptest::prelude::*;
use serde_json::json;

use s2lab_core::field::{Grid, RegionMask, ScalarField};
use s2lab_core::jacobi::Variant;
use s2lab_core::solver::{
    convexity_certificate, manufactured_case, solution_error, solve_dirichlet, unknown_mask, Case,
    ConvexityPolicy, SolveOptions, CATALOG,
};
use s2lab_core::Error;

#[test]
fn catalog_cases_parse_and_sample() {
    let g = Grid::cube(3, 1.0, 0.25).unwrap();
    for name in CATALOG {
        let params = match name {
            "paraboloid_perturbed" => json!({ "eps": 0.1 }),
            "f_oscillatory_family" => json!({ "k": 4.0 }),
            _ => json!({}),
        };
        let case = Case::from_name(name, &params).unwrap();
        assert_eq!(case.name(), name);
        let m = manufactured_case(&case, &g, Variant::Hessian).unwrap();
        assert!(m.f.values().iter().all(|v| v.is_finite() && *v > 0.0), "{name}");
    }
    assert!(Case::from_name("nope", &json!({})).is_err());
    assert!(Case::from_name("exp_sum", &json!({ "c": 1.0, "extra": 2 })).is_err());
}

#[test]
fn options_reject_unknown_and_invalid_fields() {
    assert!(serde_json::from_value::<SolveOptions>(json!({ "max_iter": 3 })).is_err());
    let o: SolveOptions = serde_json::from_value(json!({ "backtrack": 1.5 })).unwrap();
    assert!(matches!(o.validate(), Err(Error::Config(_))));
    let o: SolveOptions = serde_json::from_value(json!({ "convexity": "project" })).unwrap();
    assert_eq!(o.convexity, ConvexityPolicy::Project);
}

#[test]
fn concave_data_does_not_produce_a_solution() {
    let g = Grid::cube(3, 1.0, 0.125).unwrap();
    let f = ScalarField::constant(&g, 3.0);
    let b = ScalarField::from_fn(&g, |x| -0.5 * x.iter().map(|v| v * v).sum::<f64>());
    match solve_dirichlet(&f, &b, &SolveOptions::default()) {
        // σ₂ is even, so −|x|²/2 solves the discrete equation; it must not pass as convex
        Ok(sol) => {
            let cert = convexity_certificate(&sol.u, &unknown_mask(&g)).unwrap();
            assert!(!cert.pass);
        }
        Err(e) => assert!(matches!(e, Error::ConeExit(_) | Error::NoConvergence { .. }), "{e}"),
    }
}

#[test]
fn curvature_case_samples_graph_sigma2() {
    let g = Grid::cube(3, 1.0, 0.25).unwrap();
    let m = manufactured_case(&Case::from_name("quadratic", &json!({})).unwrap(), &g, Variant::Curvature).unwrap();
    // at the origin the graph of |x|²/2 has κ = (1, 1, 1)
    assert!((m.f.at_origin() - 3.0).abs() < 1e-14);
    // σ₂(κ) decays like |Du|^{-4} away from the origin
    let corner = m.f.at(0);
    assert!(corner < m.f.at_origin());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn random_quadratics_are_recovered(
        d in proptest::array::uniform3(0.5..2.5f64),
        off in proptest::array::uniform3(-0.2..0.2f64),
    ) {
        let a = json!({ "a": [[d[0], off[0], off[1]], [off[0], d[1], off[2]], [off[1], off[2], d[2]]] });
        let case = Case::from_name("quadratic", &a).unwrap();
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let m = manufactured_case(&case, &g, Variant::Hessian).unwrap();
        let sol = solve_dirichlet(&m.f, &m.boundary, &SolveOptions::default()).unwrap();
        let err = solution_error(&sol.u, &m.exact.unwrap().value, &RegionMask::full(&g)).unwrap();
        prop_assert!(err < 1e-10, "error {}", err);
        prop_assert!(sol.diag.convexity.pass);
    }
}
