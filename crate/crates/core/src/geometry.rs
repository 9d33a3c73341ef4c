//! Graph hypersurface quantities in Euclidean coordinates.
//!
//! For a graph `x ↦ (x, u(x))`: `W = √(1+|Du|²)`, metric `g = I + Du Duᵀ`,
//! inverse `g⁻¹ = I − Du Duᵀ / W²`, second fundamental form `h_ij = u_ij / W`,
//! shape operator `g⁻¹ h`, and linearized coefficients `F = H g⁻¹ − g⁻¹ h g⁻¹`.
//! Principal curvatures are the eigenvalues of the symmetric similarity
//! `P h P` with `P = g^{-1/2} = I − Du Duᵀ / (W(1+W))`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::field::{pack, packed_len, Derivatives, Grid, Provenance, ScalarField, SymMatField};
use crate::sigma2::{sigma2_direct, Spectrum};

/// `P = I − Du Duᵀ / (W(1+W))`, the symmetric square root of `g⁻¹`.
pub fn projection(du: &[f64]) -> DMatrix<f64> {
    let n = du.len();
    let p = DVector::from_column_slice(du);
    let w = (1.0 + p.norm_squared()).sqrt();
    DMatrix::identity(n, n) - (&p * p.transpose()) / (w * (1.0 + w))
}

/// `P` together with the conjugated Hessian `H_v = P D²v P`.
///
/// `H_v` is similar to `g⁻¹ D²v`, so its spectrum is the metric spectrum of `D²v`.
pub fn projection_and_conjugate(du: &[f64], d2v: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = projection(du);
    let hv = &p * d2v * &p;
    let hv = (&hv + hv.transpose()) * 0.5;
    (p, hv)
}

pub fn metric(du: &[f64]) -> DMatrix<f64> {
    let p = DVector::from_column_slice(du);
    DMatrix::identity(du.len(), du.len()) + &p * p.transpose()
}

pub fn metric_inverse(du: &[f64]) -> DMatrix<f64> {
    let p = DVector::from_column_slice(du);
    let w2 = 1.0 + p.norm_squared();
    DMatrix::identity(du.len(), du.len()) - (&p * p.transpose()) / w2
}

/// Pointwise graph quantities from `Du` and `D²u`.
#[derive(Clone, Debug)]
pub struct PointFrame {
    pub w: f64,
    pub g_inv: DMatrix<f64>,
    pub ii: DMatrix<f64>,
    pub kappa: Spectrum,
    pub mean: f64,
    pub sigma2_kappa: f64,
    pub f: DMatrix<f64>,
}

pub fn point_frame(du: &[f64], d2u: &DMatrix<f64>) -> PointFrame {
    let w = (1.0 + du.iter().map(|c| c * c).sum::<f64>()).sqrt();
    let g_inv = metric_inverse(du);
    let ii = d2u / w;
    let (_, conj) = projection_and_conjugate(du, &ii);
    let mean = conj.trace();
    let sigma2_kappa = sigma2_direct(&conj);
    let gi_ii_gi = &g_inv * &ii * &g_inv;
    let f = &g_inv * mean - gi_ii_gi;
    let f = (&f + f.transpose()) * 0.5;
    PointFrame {
        w,
        kappa: Spectrum::of_symmetric(&conj),
        g_inv,
        ii,
        mean,
        sigma2_kappa,
        f,
    }
}

/// Graph quantities on a whole grid.
#[derive(Clone, Debug)]
pub struct GraphFrame {
    pub u: Derivatives,
    pub w: ScalarField,
    pub g: SymMatField,
    pub g_inv: SymMatField,
    pub ii: SymMatField,
    /// `n` principal curvatures per node, descending.
    kappa: Vec<f64>,
    pub mean: ScalarField,
    pub sigma2_kappa: ScalarField,
    /// Coefficients `F^{ij}` of the linearized curvature operator.
    pub f_coeff: SymMatField,
}

impl GraphFrame {
    pub fn grid(&self) -> &Grid {
        self.w.grid()
    }

    pub fn provenance(&self) -> Provenance {
        self.u.provenance
    }

    pub fn kappa_at(&self, node: usize) -> &[f64] {
        let n = self.grid().dim();
        &self.kappa[node * n..(node + 1) * n]
    }

    /// Shape operator `g⁻¹ h` (not symmetric in general).
    pub fn shape_at(&self, node: usize) -> DMatrix<f64> {
        self.g_inv.matrix_at(node) * self.ii.matrix_at(node)
    }
}

pub fn build_graph_frame(u: &Derivatives) -> GraphFrame {
    let grid = u.grid().clone();
    let n = grid.dim();
    let p = packed_len(n);
    let points: Vec<PointFrame> = (0..grid.len())
        .into_par_iter()
        .map(|node| point_frame(u.gradient.at(node), &u.hessian.matrix_at(node)))
        .collect();
    let mut g = vec![0.0; grid.len() * p];
    let mut g_inv = vec![0.0; grid.len() * p];
    let mut ii = vec![0.0; grid.len() * p];
    let mut fc = vec![0.0; grid.len() * p];
    let mut kappa = Vec::with_capacity(grid.len() * n);
    for (node, pf) in points.iter().enumerate() {
        let r = node * p..(node + 1) * p;
        pack(&metric(u.gradient.at(node)), &mut g[r.clone()]);
        pack(&pf.g_inv, &mut g_inv[r.clone()]);
        pack(&pf.ii, &mut ii[r.clone()]);
        pack(&pf.f, &mut fc[r]);
        kappa.extend_from_slice(pf.kappa.values());
    }
    let scalar = |f: &dyn Fn(&PointFrame) -> f64| {
        ScalarField::new(grid.clone(), points.iter().map(f).collect()).expect("finite frame")
    };
    GraphFrame {
        w: scalar(&|pf| pf.w),
        mean: scalar(&|pf| pf.mean),
        sigma2_kappa: scalar(&|pf| pf.sigma2_kappa),
        g: SymMatField::new(grid.clone(), g).expect("finite metric"),
        g_inv: SymMatField::new(grid.clone(), g_inv).expect("finite metric"),
        ii: SymMatField::new(grid.clone(), ii).expect("finite form"),
        f_coeff: SymMatField::new(grid.clone(), fc).expect("finite coefficients"),
        kappa,
        u: u.clone(),
    }
}

/// `v_{;ij} = D_ij v − ((Du·Dv)/W²) D_ij u`.
pub fn covariant_hessian(v: &Derivatives, frame: &GraphFrame) -> SymMatField {
    let grid = frame.grid();
    let n = grid.dim();
    let p = packed_len(n);
    let mut out = vec![0.0; grid.len() * p];
    out.par_chunks_mut(p).enumerate().for_each(|(node, o)| {
        let du = frame.u.gradient.at(node);
        let dv = v.gradient.at(node);
        let w2 = frame.w.at(node).powi(2);
        let c = du.iter().zip(dv).map(|(a, b)| a * b).sum::<f64>() / w2;
        let hv = v.hessian.at(node);
        let hu = frame.u.hessian.at(node);
        for k in 0..p {
            o[k] = hv[k] - c * hu[k];
        }
    });
    SymMatField::new(grid.clone(), out).expect("finite covariant Hessian")
}

/// Surface operators applied to one function.
#[derive(Clone, Debug)]
pub struct SurfaceLaplacians {
    /// `g^{ij} v_{;ij}`
    pub delta_m: ScalarField,
    /// `F^{ij} v_{;ij}`
    pub delta_f: ScalarField,
    /// `F^{ij} v_i v_j`
    pub grad_f_sq: ScalarField,
    /// `g^{ij} v_i v_j`
    pub grad_m_sq: ScalarField,
}

/// `Σ_ij A_ij B_ij` for two packed symmetric matrices.
#[inline]
pub fn packed_contract(n: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut k = 0;
    for i in 0..n {
        acc += a[k] * b[k];
        for j in 1..n - i {
            acc += 2.0 * a[k + j] * b[k + j];
        }
        k += n - i;
    }
    acc
}

/// `vᵀ A v` for a packed symmetric `A`.
#[inline]
pub fn packed_quadratic(n: usize, a: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut k = 0;
    for i in 0..n {
        acc += a[k] * v[i] * v[i];
        for j in i + 1..n {
            acc += 2.0 * a[k + j - i] * v[i] * v[j];
        }
        k += n - i;
    }
    acc
}

pub fn surface_laplacians(v: &Derivatives, frame: &GraphFrame) -> SurfaceLaplacians {
    let grid = frame.grid();
    let n = grid.dim();
    let cov = covariant_hessian(v, frame);
    let rows: Vec<[f64; 4]> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let gi = frame.g_inv.at(node);
            let fc = frame.f_coeff.at(node);
            let c = cov.at(node);
            let dv = v.gradient.at(node);
            [
                packed_contract(n, gi, c),
                packed_contract(n, fc, c),
                packed_quadratic(n, fc, dv),
                packed_quadratic(n, gi, dv),
            ]
        })
        .collect();
    let col = |k: usize| {
        ScalarField::new(grid.clone(), rows.iter().map(|r| r[k]).collect())
            .expect("finite surface operator")
    };
    SurfaceLaplacians {
        delta_m: col(0),
        delta_f: col(1),
        grad_f_sq: col(2),
        grad_m_sq: col(3),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AnalyticField;
    use crate::sigma2::sigma_k;

    struct HalfSquare(usize);

    impl AnalyticField for HalfSquare {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, x: &[f64]) -> f64 {
            0.5 * x.iter().map(|c| c * c).sum::<f64>()
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(x);
        }
        fn hessian(&self, _x: &[f64], out: &mut [f64]) {
            let n = self.0;
            out.fill(0.0);
            for i in 0..n {
                out[crate::field::packed_index(n, i, i)] = 1.0;
            }
        }
    }

    #[test]
    fn flat_graph() {
        let g = Grid::cube(3, 1.0, 0.25).unwrap();
        let u = Derivatives::from_fd(&ScalarField::constant(&g, 2.0));
        let fr = build_graph_frame(&u);
        for node in 0..g.len() {
            assert_eq!(fr.w.at(node), 1.0);
            assert_eq!(fr.mean.at(node), 0.0);
            assert!(fr.kappa_at(node).iter().all(|&k| k == 0.0));
        }
    }

    #[test]
    fn paraboloid_curvatures() {
        let g = Grid::cube(3, 1.0, 0.25).unwrap();
        let u = Derivatives::from_analytic(&g, &HalfSquare(3));
        let fr = build_graph_frame(&u);
        let o = g.origin_node();
        assert!((fr.mean.at(o) - 3.0).abs() < 1e-14);
        assert!((fr.sigma2_kappa.at(o) - 3.0).abs() < 1e-14);
        for node in 0..g.len() {
            let x = g.coords_vec(node);
            let w = (1.0 + x.iter().map(|c| c * c).sum::<f64>()).sqrt();
            let k = fr.kappa_at(node);
            assert!((k[0] - 1.0 / w).abs() < 1e-12);
            assert!((k[1] - 1.0 / w).abs() < 1e-12);
            assert!((k[2] - 1.0 / w.powi(3)).abs() < 1e-12);
            let s2 = sigma_k(&Spectrum::new(k.to_vec()).unwrap(), 2).unwrap();
            assert!((s2 - fr.sigma2_kappa.at(node)).abs() < 1e-12);
            // tr(F h) = 2 σ₂(κ)
            let tr = (fr.f_coeff.matrix_at(node) * fr.ii.matrix_at(node)).trace();
            assert!((tr - 2.0 * s2).abs() < 1e-12);
            // det g = W²
            assert!((fr.g.matrix_at(node).determinant() - w * w).abs() < 1e-12);
            let eye = fr.g.matrix_at(node) * fr.g_inv.matrix_at(node);
            assert!((eye - DMatrix::identity(3, 3)).norm() < 1e-12);
        }
    }

    #[test]
    fn delta_f_of_u_is_twice_sigma2_over_w() {
        let g = Grid::cube(3, 1.0, 0.25).unwrap();
        let u = Derivatives::from_analytic(&g, &HalfSquare(3));
        let fr = build_graph_frame(&u);
        let ops = surface_laplacians(&u, &fr);
        for node in 0..g.len() {
            let w = fr.w.at(node);
            let want = 2.0 * fr.sigma2_kappa.at(node) / w;
            assert!((ops.delta_f.at(node) - want).abs() < 1e-12);
            // H = W Δ_M u
            assert!((fr.mean.at(node) - w * ops.delta_m.at(node)).abs() < 1e-12);
            assert!(ops.grad_m_sq.at(node) <= 1.0);
        }
    }

    #[test]
    fn conjugate_matches_metric_spectrum() {
        let du = [0.3, -1.2, 0.7];
        let d2v = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, -0.3, 0.0, -0.3, 0.5]);
        let (p, hv) = projection_and_conjugate(&du, &d2v);
        let gi = metric_inverse(&du);
        assert!((&p * &p - &gi).norm() < 1e-14);
        let mut a: Vec<f64> = (&gi * &d2v).eigenvalues().unwrap().iter().copied().collect();
        a.sort_by(|x, y| y.total_cmp(x));
        let b = Spectrum::of_symmetric(&hv);
        for (x, y) in a.iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn packed_helpers_match_dense() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 3, &[0.5, -1.0, 0.0, -1.0, 2.0, 1.5, 0.0, 1.5, -2.0]);
        let (mut pa, mut pb) = ([0.0; 6], [0.0; 6]);
        pack(&a, &mut pa);
        pack(&b, &mut pb);
        assert!((packed_contract(3, &pa, &pb) - a.component_mul(&b).sum()).abs() < 1e-14);
        let v = [0.2, -0.4, 1.1];
        let dv = DVector::from_column_slice(&v);
        assert!((packed_quadratic(3, &pa, &v) - (dv.transpose() * &a * &dv)[(0, 0)]).abs() < 1e-14);
    }
}
