//! Pointwise σ₂ algebra.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues sorted in descending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Hypothesis(format!("non-finite eigenvalue {v}")));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Spectrum(values))
    }

    /// Eigenvalues of a symmetric matrix.
    pub fn of_symmetric(s: &DMatrix<f64>) -> Self {
        let eig = s.clone().symmetric_eigen();
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        Spectrum(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0[0]
    }

    pub fn min(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn trace(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `σ_k` via the recurrence `e_j ← e_j + λ e_{j-1}`.
pub fn sigma_k(s: &Spectrum, k: usize) -> Result<f64> {
    sigma_k_of(s.values(), k)
}

pub fn sigma_k_of(values: &[f64], k: usize) -> Result<f64> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(Error::OrderOutOfRange { k, n });
    }
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for &lambda in values {
        for j in (1..=k).rev() {
            e[j] += lambda * e[j - 1];
        }
    }
    Ok(e[k])
}

/// `((tr S)² − |S|²) / 2`.
pub fn sigma2_direct(s: &DMatrix<f64>) -> f64 {
    let tr = s.trace();
    0.5 * (tr * tr - s.norm_squared())
}

/// [`sigma2_direct`] on a packed upper triangle.
#[inline]
pub fn sigma2_packed(n: usize, p: &[f64]) -> f64 {
    let mut tr = 0.0;
    let mut frob = 0.0;
    let mut k = 0;
    for i in 0..n {
        tr += p[k];
        frob += p[k] * p[k];
        for j in 1..n - i {
            frob += 2.0 * p[k + j] * p[k + j];
        }
        k += n - i;
    }
    0.5 * (tr * tr - frob)
}

/// `tr(S) I − S`, the coefficients of the linearized σ₂ operator.
pub fn linearized_coefficients(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    DMatrix::identity(n, n) * s.trace() - s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeLabel {
    Convex,
    Strictly2Convex,
    Weakly2Convex,
    Outside,
}

impl ConeLabel {
    /// Inside the closed Γ₂ cone (the admission rule for barriers).
    pub fn admissible(self) -> bool {
        !matches!(self, ConeLabel::Outside)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeClass {
    pub sigma1: f64,
    pub sigma2: f64,
    pub label: ConeLabel,
}

/// Classifies `S` against the convex cone and Γ₂.
///
/// Precedence: convex (`λ_min ≥ −tol`), then strictly 2-convex
/// (`σ₁ > 0`, `σ₂ > tol`), then weakly 2-convex (`σ₁ > 0`, `σ₂ ≥ −tol`).
pub fn cone_classify(s: &DMatrix<f64>, tol: f64) -> ConeClass {
    let sigma1 = s.trace();
    let sigma2 = sigma2_direct(s);
    let label = if Spectrum::of_symmetric(s).min() >= -tol {
        ConeLabel::Convex
    } else if sigma1 > 0.0 && sigma2 > tol {
        ConeLabel::Strictly2Convex
    } else if sigma1 > 0.0 && sigma2 >= -tol {
        ConeLabel::Weakly2Convex
    } else {
        ConeLabel::Outside
    };
    ConeClass {
        sigma1,
        sigma2,
        label,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdCriterion {
    pub value: f64,
    pub psd: bool,
}

/// Default band for the PSD decision.
pub const PSD_TOL: f64 = 1e-10;

/// Decides `diag(a) − L Lᵀ ⪰ 0` through `1 − Σ L_i² / a_i ≥ 0`.
pub fn psd_criterion(a: &[f64], l: &[f64], tol: f64) -> Result<PsdCriterion> {
    if a.len() != l.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: l.len(),
        });
    }
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::NonPositiveWeight { index, value });
    }
    let value = 1.0 - a.iter().zip(l).map(|(ai, li)| li * li / ai).sum::<f64>();
    Ok(PsdCriterion {
        value,
        psd: value >= -tol,
    })
}

/// The quadratic-form coefficient `Q̂_k` for index `k` (0-based).
///
/// `Q̂_k = 1 − ⅓(1 + δ(Δ−λ_k)/Δ) Σ_{i≠k} (λ_i/Δ)² − (1 + δ(Δ−λ_k)/Δ)(λ_k/Δ)²`
/// with `Δ = Σλ_i`. `f` is checked against `σ₂(s)`.
pub fn qhat(s: &Spectrum, k: usize, delta: f64, f: f64) -> Result<f64> {
    let n = s.len();
    if k >= n {
        return Err(Error::OrderOutOfRange { k: k + 1, n });
    }
    let tr = s.trace();
    if !(tr > 0.0) {
        return Err(Error::NonPositiveTrace(tr));
    }
    let s2 = sigma_k(s, 2)?;
    if (s2 - f).abs() > 1e-9 * f.abs().max(1.0) {
        return Err(Error::Hypothesis(format!(
            "sigma_2 of the spectrum is {s2}, expected f = {f}"
        )));
    }
    let lam = s.values();
    let weight = 1.0 + delta * (tr - lam[k]) / tr;
    let others: f64 = lam
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &l)| (l / tr).powi(2))
        .sum();
    Ok(1.0 - weight * others / 3.0 - weight * (lam[k] / tr).powi(2))
}

/// `(Σκ)(Σκ³) − (Σκ²)²`, nonnegative for nonnegative spectra.
pub fn commutator_gap(s: &Spectrum) -> Result<f64> {
    if let Some(&v) = s.values().iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeEntry(v));
    }
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    for &k in s.values() {
        s1 += k;
        s2 += k * k;
        s3 += k * k * k;
    }
    Ok(s1 * s3 - s2 * s2)
}

/// Convex spectrum with `σ₂ = target`: sorted `|N(0,1)|` draws rescaled by homogeneity.
pub fn random_convex_spectrum<R: Rng + ?Sized>(rng: &mut R, n: usize, target: f64) -> Spectrum {
    assert!(n >= 2 && target > 0.0);
    loop {
        let raw: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
            .collect();
        let s2 = sigma_k_of(&raw, 2).expect("n >= 2");
        if s2 > 1e-8 {
            let c = (target / s2).sqrt();
            return Spectrum::new(raw.into_iter().map(|v| v * c).collect())
                .expect("finite draws");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(v: &[f64]) -> Spectrum {
        Spectrum::new(v.to_vec()).unwrap()
    }

    fn brute_sigma(v: &[f64], k: usize) -> f64 {
        let n = v.len();
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| v[i]).product::<f64>())
            .sum()
    }

    #[test]
    fn sigma_k_small_cases() {
        assert_eq!(sigma_k(&spec(&[1.0, 1.0, 1.0]), 2).unwrap(), 3.0);
        assert_eq!(sigma_k(&spec(&[3.0, 2.0, 1.0]), 2).unwrap(), 11.0);
        assert!(matches!(
            sigma_k(&spec(&[1.0, 2.0]), 3),
            Err(Error::OrderOutOfRange { k: 3, n: 2 })
        ));
        assert!(sigma_k(&spec(&[1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn direct_and_linearized_on_diag() {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(sigma2_direct(&s), 11.0);
        let f = linearized_coefficients(&s);
        assert_eq!(f, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 4.0, 3.0])));
        assert_eq!((&f * &s).trace(), 22.0);
        assert_eq!(sigma2_direct(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn packed_matches_dense() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, -2.0, 0.5, 3.0, 0.25, -2.0, 0.25, -1.0]);
        let mut p = [0.0; 6];
        crate::field::pack(&s, &mut p);
        assert!((sigma2_packed(3, &p) - sigma2_direct(&s)).abs() < 1e-14);
    }

    #[test]
    fn classification_examples() {
        let d = |v: &[f64]| DMatrix::from_diagonal(&nalgebra::DVector::from_vec(v.to_vec()));
        assert_eq!(cone_classify(&d(&[1.0, 1.0, 1.0]), 1e-12).label, ConeLabel::Convex);
        assert_eq!(
            cone_classify(&d(&[4.0, 4.0, -2.0]), 1e-12).label,
            ConeLabel::Weakly2Convex
        );
        assert_eq!(
            cone_classify(&d(&[8.0, 8.0, -2.0, -2.0]), 1e-12).label,
            ConeLabel::Strictly2Convex
        );
        assert_eq!(cone_classify(&d(&[1.0, -1.0]), 1e-12).label, ConeLabel::Outside);
    }

    #[test]
    fn psd_examples() {
        let c = psd_criterion(&[1.0, 1.0], &[1.0, 0.0], PSD_TOL).unwrap();
        assert_eq!((c.value, c.psd), (0.0, true));
        let c = psd_criterion(&[1.0, 1.0], &[1.0, 1.0], PSD_TOL).unwrap();
        assert_eq!((c.value, c.psd), (-1.0, false));
        assert!(matches!(
            psd_criterion(&[1.0, 0.0], &[0.0, 0.0], PSD_TOL),
            Err(Error::NonPositiveWeight { index: 1, .. })
        ));
    }

    #[test]
    fn qhat_at_equal_entries() {
        let q = qhat(&spec(&[1.0, 1.0, 1.0]), 0, 1.75, 3.0).unwrap();
        assert!((q - 97.0 / 162.0).abs() < 1e-15);
        // s = (2, 1), δ = 0: 1 − (1/3)(1/9) − 4/9 for k = 0
        let q = qhat(&spec(&[2.0, 1.0]), 0, 0.0, 2.0).unwrap();
        assert!((q - (1.0 - 1.0 / 27.0 - 4.0 / 9.0)).abs() < 1e-15);
        assert!(matches!(
            qhat(&spec(&[-1.0, -1.0]), 0, 1.0, 1.0),
            Err(Error::NonPositiveTrace(_))
        ));
        assert!(qhat(&spec(&[2.0, 1.0]), 0, 0.0, 5.0).is_err());
    }

    #[test]
    fn qhat_equal_entries_sweep() {
        for n in 2..=10 {
            let lam = (2.0 / (n * (n - 1)) as f64).sqrt();
            let s = Spectrum::new(vec![lam; n]).unwrap();
            let q = qhat(&s, 0, 0.0, 1.0).unwrap();
            let want = 1.0 - (n - 1) as f64 / (3.0 * (n * n) as f64) - 1.0 / (n * n) as f64;
            assert!((q - want).abs() < 1e-12 && q >= 0.0);
        }
    }

    #[test]
    fn commutator_examples() {
        assert_eq!(commutator_gap(&spec(&[1.0, 1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(commutator_gap(&spec(&[2.0, 1.0])).unwrap(), 2.0);
        assert!(matches!(
            commutator_gap(&spec(&[2.0, -1.0])),
            Err(Error::NegativeEntry(_))
        ));
    }

    #[test]
    fn random_spectrum_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=10 {
            let s = random_convex_spectrum(&mut rng, n, 4.5);
            assert!(s.min() >= 0.0);
            assert!((sigma_k(&s, 2).unwrap() - 4.5).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn sigma_k_matches_subset_sum(v in prop::collection::vec(-3.0f64..3.0, 1..=8), k in 1usize..=8) {
            prop_assume!(k <= v.len());
            let s = Spectrum::new(v.clone()).unwrap();
            let got = sigma_k(&s, k).unwrap();
            let want = brute_sigma(&v, k);
            prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
        }

        #[test]
        fn trace_identity(entries in prop::collection::vec(-2.0f64..2.0, 21)) {
            let n = 6;
            let s = crate::field::unpack(n, &entries);
            let f = linearized_coefficients(&s);
            prop_assert!(((&f * &s).trace() - 2.0 * sigma2_direct(&s)).abs() < 1e-12 * (1.0 + s.norm_squared()));
        }

        #[test]
        fn convex_guard(seed in any::<u64>(), n in 2usize..=8, f in 1.0f64..10.0) {
            // (Δ − λ_i) Δ ≥ f for convex spectra with σ₂ = f
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_convex_spectrum(&mut rng, n, f);
            let tr = s.trace();
            for &l in s.values() {
                prop_assert!((tr - l) * tr >= f * (1.0 - 1e-12));
            }
        }
    }
}
