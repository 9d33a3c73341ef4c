use proptest::prelude::*;

use s2lab_core::field::{Grid, RegionMask, ScalarField};
use s2lab_core::jacobi::{
    nonconvex_scan, trace_jacobi_curvature, trace_jacobi_hessian, CurvatureInput, HessianInput,
};
use s2lab_core::sigma2::sigma2_direct;
use s2lab_core::Error;

fn quadratic_input(d: &[f64; 3], g: &Grid) -> HessianInput {
    let u = ScalarField::from_fn(g, |x| 0.5 * (d[0] * x[0] * x[0] + d[1] * x[1] * x[1] + d[2] * x[2] * x[2]));
    let s2 = d[0] * d[1] + d[0] * d[2] + d[1] * d[2];
    HessianInput::from_samples(&u, &ScalarField::constant(g, s2)).unwrap()
}

#[test]
fn hypotheses_are_enforced() {
    let g = Grid::cube(3, 1.0, 0.125).unwrap();
    let mask = RegionMask::interior(&g, 2);
    let input = quadratic_input(&[0.2, 0.2, 0.2], &g);
    // σ₂ = 0.12 < 1
    assert!(matches!(trace_jacobi_hessian(&input, 0.5, None, &mask), Err(Error::Hypothesis(_))));
    let ok = quadratic_input(&[1.0, 1.0, 1.0], &g);
    assert!(matches!(
        trace_jacobi_hessian(&ok, 1.0, None, &mask),
        Err(Error::EpsilonOutOfRange { .. })
    ));
    assert!(trace_jacobi_hessian(&ok, 0.5, None, &mask).is_ok());
}

#[test]
fn nonconvex_scan_reports_without_asserting() {
    let rep = nonconvex_scan(3, 1.0, 0.125, &[0.0, 0.3, 0.6], 0.5).unwrap();
    let convex_first = rep.rows.first().map(|r| (r.param, r.convex));
    assert_eq!(convex_first, Some((0.0, true)));
    for row in &rep.rows {
        assert!(row.tolerance > 0.0 && row.min_residual.is_finite());
    }
    // D²u(0) has eigenvalues 1 ± 2a
    assert!(rep.rows.iter().any(|r| !r.convex), "{rep:?}");
}

#[test]
fn paraboloid_curvature_residual_shrinks_with_h() {
    let mut mins = Vec::new();
    for h in [0.125, 0.0625] {
        let g = Grid::cube(3, 0.5, h).unwrap();
        let u = ScalarField::from_fn(&g, |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>());
        let f = ScalarField::from_fn(&g, |x| {
            // σ₂ of the shape operator of the graph of |x|²/2
            let w2 = 1.0 + x.iter().map(|v| v * v).sum::<f64>();
            let m = nalgebra::DMatrix::from_fn(3, 3, |i, j| {
                let gij = if i == j { 1.0 } else { 0.0 } - x[i] * x[j] / w2;
                gij / w2.sqrt()
            });
            sigma2_direct(&m)
        });
        let input = CurvatureInput::from_samples(&u, &f).unwrap();
        let r = trace_jacobi_curvature(&input, 0.5, None, &RegionMask::interior(&g, 3)).unwrap();
        mins.push(r.min_residual.min(0.0).abs());
    }
    // the negative part is pure truncation error
    assert!(mins[1] <= mins[0] / 2.0 + 1e-12, "{mins:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn quadratic_residual_vanishes(d in proptest::array::uniform3(0.7..3.0f64)) {
        let g = Grid::cube(3, 1.0, 0.125).unwrap();
        let input = quadratic_input(&d, &g);
        prop_assume!(d[0] * d[1] + d[0] * d[2] + d[1] * d[2] >= 1.0);
        let r = trace_jacobi_hessian(&input, 0.5, None, &RegionMask::interior(&g, 2)).unwrap();
        prop_assert!(r.residual.max_abs() < 1e-8);
    }
}
