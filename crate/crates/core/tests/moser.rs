use num_rational::Ratio;
use proptest::prelude::*;

use s2lab_core::field::{Grid, RegionMask, ScalarField};
use s2lab_core::moser::{
    build_schedule, iteration_constants, minimal_k0, schedule_with_k0, w2p_recursion_check, W2pInput,
};
use s2lab_core::Error;

type Q = Ratio<i128>;

/// Exact sequences: `p_0 = γ^{k0}`, `q_0 = 2n p_0`, `p_k = p_{k−1}/γ + 2`,
/// `q_k = q_{k−1}/γ − 2`, `r_k = 1/2 + Σ_{i≤k} 2^{−(k0−i+2)}`.
fn exact(n: i128, k0: usize) -> (Vec<Q>, Vec<Q>, Vec<Q>) {
    let gamma = Q::new(n, n - 2);
    let mut p = vec![(0..k0).fold(Q::from_integer(1), |acc, _| acc * gamma)];
    let mut q = vec![Q::from_integer(2 * n) * p[0]];
    for k in 1..=k0 {
        p.push(p[k - 1] / gamma + 2);
        q.push(q[k - 1] / gamma - 2);
    }
    let r = (0..=k0)
        .map(|k| {
            (1..=k).fold(Q::new(1, 2), |acc, i| acc + Q::new(1, 1 << (k0 - i + 2)))
        })
        .collect();
    (p, q, r)
}

fn exact_valid(n: i128, p: &[Q], q: &[Q], r: &[Q]) -> bool {
    let nq = Q::from_integer(n);
    let last = p.len() - 1;
    p.iter().all(|v| *v > nq)
        && q.iter().all(|v| *v >= Q::from_integer(2))
        && p.iter().zip(q).all(|(a, b)| *b / *a <= nq * 2)
        && p[last] <= nq + 1
        && q[last] >= nq
        && r[last] < Q::from_integer(1)
}

fn close(x: f64, e: Q) -> bool {
    let e = *e.numer() as f64 / *e.denom() as f64;
    (x - e).abs() <= 1e-12 * e.abs().max(1.0)
}

#[test]
fn schedules_match_the_rational_oracle() {
    for n in 3..=10usize {
        let s = build_schedule(n).unwrap();
        let (p, q, r) = exact(n as i128, s.k0);
        assert!(s.p.iter().zip(&p).all(|(a, b)| close(*a, *b)), "p at n={n}");
        assert!(s.q.iter().zip(&q).all(|(a, b)| close(*a, *b)), "q at n={n}");
        assert!(s.r.iter().zip(&r).all(|(a, b)| close(*a, *b)), "r at n={n}");
        assert!(exact_valid(n as i128, &p, &q, &r), "n={n}");
        // the chosen k0 is the first valid one at or above the minimal k0
        for k in s.minimal_k0..s.k0 {
            let (p, q, r) = exact(n as i128, k);
            assert!(!exact_valid(n as i128, &p, &q, &r), "n={n} k0={k} already valid");
        }
    }
}

#[test]
fn validator_agrees_with_exact_checks_off_the_minimum() {
    for n in 3..=8usize {
        for k0 in 1..=8 {
            let s = schedule_with_k0(n, k0).unwrap();
            let (p, q, r) = exact(n as i128, k0);
            assert_eq!(s.checks.all(), exact_valid(n as i128, &p, &q, &r), "n={n} k0={k0}");
        }
    }
}

#[test]
fn n4_equality_schedule_is_exact() {
    let (p, q, r) = exact(4, 2);
    assert_eq!(p, vec![Q::from_integer(4); 3]);
    assert_eq!(q, vec![Q::from_integer(32), Q::from_integer(14), Q::from_integer(5)]);
    assert_eq!(r, vec![Q::new(1, 2), Q::new(5, 8), Q::new(7, 8)]);
    assert_eq!(minimal_k0(4).unwrap(), 2);
}

#[test]
fn low_dimensions_are_rejected() {
    assert!(matches!(build_schedule(2), Err(Error::NotApplicable(_))));
    assert!(matches!(build_schedule(1), Err(Error::Config(_))));
}

#[test]
fn iteration_constants_stay_under_caps() {
    for n in 3..=12 {
        let c = iteration_constants(&build_schedule(n).unwrap());
        assert!(c.within_caps, "n={n}: {c:?}");
        assert!(c.sum_a <= c.cap && c.sum_b <= c.cap && c.product_log <= c.product_cap);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recursion_ledger_of_constant_base(a in 0.5..3.0f64, p_max in 2usize..7) {
        // constant A with φ ≡ 1 on Ω gives I_p = A^p |Ω| and ρ_p = I_{p+1}/I_p = A
        let g = Grid::cube(3, 1.0, 0.25).unwrap();
        let omega = RegionMask::ball(&g, 0.6);
        let phi = ScalarField::constant(&g, 1.0);
        let base = ScalarField::constant(&g, a);
        let l = w2p_recursion_check(&W2pInput { a: &base, phi: &phi, omega: &omega, area: None }, p_max, None).unwrap();
        prop_assert_eq!(l.p.len(), p_max);
        for pair in l.i_p.windows(2) {
            prop_assert!((pair[1] / pair[0] / a - 1.0).abs() < 1e-9);
        }
    }
}
