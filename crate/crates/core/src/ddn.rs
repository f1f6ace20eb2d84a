//! Implicit differentiation of the argmin map `H̃ ↦ U*` of the proximal
//! nearest-ETF problem.
//!
//! All Jacobians use the row-major layout of [`crate::vectorisation`]. With
//! `f` the proximal objective and `J(U) = UᵀU − I` the constraint, the
//! sensitivity of `rvec(U*)` to `rvec(H̃)` is
//!
//! ```text
//! Dy = G⁻¹Aᵀ (A G⁻¹ Aᵀ)⁻¹ A G⁻¹ B − G⁻¹ B
//! A  = L_C (K_CC + I)(U ⊗ I_C)ᵀ                    (C(C+1)/2 × dC)
//! B  = −2 (I_d ⊗ M̃) = −(2/√(C−1)) (I_d ⊗ (I − 11ᵀ/C))
//! G  = rvec(D²_UU f) − I_d ⊗ Σ(U) = I_d ⊗ (2M̃² + δI − Σ(U))
//! ```
//!
//! Because `G = I_d ⊗ K` for a `C×C` block `K`, and `UᵀU = I`, the Schur
//! system `A G⁻¹ Aᵀ` reduces to the Sylvester equation `K⁻¹Λ + ΛK⁻¹ = R`
//! in a symmetric `Λ`. [`ImplicitJacobian`] works entirely with these `C×C`
//! factors, so a vector-Jacobian product costs `O(dC² + C³)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nearest_etf::NearestEtfProblem;
use crate::stiefel::{riemannian_gradient, StiefelPoint};
use crate::vectorisation::{kron, rvec, rvec_inv, CommutationMatrix, EliminationMatrix, IdentityKron};

/// Riemannian gradient norm above which the argmin conditions are not
/// considered met.
pub const STATIONARITY_TOL: f64 = 1e-6;

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `A = L_C (K_CC + I_{C²}) (U ⊗ I_C)ᵀ`, dense.
pub fn constraint_jacobian(u: &StiefelPoint) -> Result<DMatrix<f64>> {
    let (_, c) = u.dims();
    let k = CommutationMatrix::new(c, c).to_dense() + DMatrix::identity(c * c, c * c);
    let l = EliminationMatrix::new(c).to_dense();
    let a = l * k * kron(u.matrix(), &DMatrix::identity(c, c)).transpose();
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::Constraint(format!(
            "constraint Jacobian is rank deficient (σ_min/σ_max = {:.3e})",
            smin / smax
        )));
    }
    Ok(a)
}

/// `B = −2 (I_d ⊗ M̃)`: the derivative of the Euclidean gradient in `U`
/// with respect to `H̃`.
pub fn mixed_hessian(problem: &NearestEtfProblem) -> IdentityKron {
    let (d, _) = problem.dims();
    IdentityKron::new(d, problem.m_tilde() * -2.0)
}

/// `Σ(U) = ½(∇f(U)ᵀU + Uᵀ∇f(U))`: the Lagrange multiplier functions of the
/// orthonormality constraints, `Σ_ss = ⟨∂f/∂u_s, u_s⟩` and
/// `Σ_pq = ½(⟨∂f/∂u_q, u_p⟩ + ⟨∂f/∂u_p, u_q⟩)`.
pub fn sigma_matrix(u: &DMatrix<f64>, euclidean_grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.shape() != euclidean_grad.shape() {
        return Err(Error::Dimension("gradient shape differs from point".into()));
    }
    Ok(sym(&(euclidean_grad.transpose() * u)))
}

/// Euclidean Hessian of the proximal objective in rvec layout:
/// `I_d ⊗ (2M̃² + δ I_C)`.
pub fn objective_hessian(problem: &NearestEtfProblem) -> IdentityKron {
    let (d, c) = problem.dims();
    let m = problem.m_tilde();
    IdentityKron::new(d, m * m * 2.0 + DMatrix::identity(c, c) * problem.delta())
}

/// `G = rvec(D²_UU f) − I_d ⊗ Σ(U)` via the embedded gradient field.
#[derive(Debug, Clone)]
pub struct Curvature {
    pub g: IdentityKron,
    /// Riemannian gradient norm at `U`; the formula assumes it is ~0.
    pub stationarity: f64,
}

impl Curvature {
    pub fn is_stationary(&self) -> bool {
        self.stationarity <= STATIONARITY_TOL
    }
}

pub fn curvature_g(problem: &NearestEtfProblem, u: &StiefelPoint, euclidean_grad: &DMatrix<f64>) -> Result<Curvature> {
    let sigma = sigma_matrix(u.matrix(), euclidean_grad)?;
    let hess = objective_hessian(problem);
    let stationarity = riemannian_gradient(u, euclidean_grad)?.norm();
    Ok(Curvature { g: IdentityKron::new(hess.d, hess.block - sigma), stationarity })
}

/// `G` assembled the long way: solve `λᵀA = D_U f` in the least-squares sense
/// and contract the multipliers with the constraint Hessians
/// `I_d ⊗ (e_p e_qᵀ + e_q e_pᵀ)`. Dense; for cross-checking only.
pub fn curvature_g_via_multipliers(problem: &NearestEtfProblem, u: &StiefelPoint) -> Result<DMatrix<f64>> {
    let (d, c) = problem.dims();
    let a = constraint_jacobian(u)?;
    let grad = rvec(&problem.euclidean_gradient(u.matrix()));
    let lambda = (&a * a.transpose())
        .lu()
        .solve(&(&a * grad))
        .ok_or_else(|| Error::Numerical("multiplier system is singular".into()))?;
    let mut g = objective_hessian(problem).to_dense();
    let eye = DMatrix::identity(d, d);
    for (k, &(p, q)) in EliminationMatrix::new(c).pairs().iter().enumerate() {
        let mut e = DMatrix::zeros(c, c);
        e[(p, q)] += 1.0;
        e[(q, p)] += 1.0;
        g -= kron(&eye, &e) * lambda[k];
    }
    Ok(g)
}

/// Gradients of the constraint functions `j_s = ½‖u_s‖²` and
/// `j_pq = ⟨u_p, u_q⟩` (p < q), as `d×C` matrices, in the order
/// `j_1 … j_C, j_12, j_13, …, j_{C−1,C}`.
pub fn constraint_function_gradients(u: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let (d, c) = u.shape();
    let mut out = Vec::with_capacity(c * (c + 1) / 2);
    for s in 0..c {
        let mut g = DMatrix::zeros(d, c);
        g.set_column(s, &u.column(s));
        out.push(g);
    }
    for p in 0..c {
        for q in p + 1..c {
            let mut g = DMatrix::zeros(d, c);
            g.set_column(p, &u.column(q));
            g.set_column(q, &u.column(p));
            out.push(g);
        }
    }
    out
}

/// Gram matrix `[⟨∇j_a, ∇j_b⟩]` of the constraint function gradients.
pub fn constraint_gram(u: &DMatrix<f64>) -> DMatrix<f64> {
    let grads = constraint_function_gradients(u);
    let n = grads.len();
    DMatrix::from_fn(n, n, |a, b| grads[a].dot(&grads[b]))
}

/// `Σ(U)` from the determinant-ratio definition of the multiplier functions:
/// each `σ` is `det(Gram with one column replaced by ⟨∇f, ∇j_·⟩) / det(Gram)`.
pub fn sigma_via_gram_determinants(u: &DMatrix<f64>, euclidean_grad: &DMatrix<f64>) -> DMatrix<f64> {
    let (_, c) = u.shape();
    let grads = constraint_function_gradients(u);
    let gram = constraint_gram(u);
    let det = gram.determinant();
    let rhs: Vec<f64> = grads.iter().map(|g| euclidean_grad.dot(g)).collect();
    let sigma_at = |k: usize| {
        let mut m = gram.clone();
        for (i, &v) in rhs.iter().enumerate() {
            m[(i, k)] = v;
        }
        m.determinant() / det
    };
    let mut out = DMatrix::zeros(c, c);
    for s in 0..c {
        out[(s, s)] = sigma_at(s);
    }
    let mut k = c;
    for p in 0..c {
        for q in p + 1..c {
            let v = sigma_at(k);
            out[(p, q)] = v;
            out[(q, p)] = v;
            k += 1;
        }
    }
    out
}

/// The sensitivity `Dy` of the argmin with respect to `H̃`, held in factored
/// form.
#[derive(Debug, Clone)]
pub struct ImplicitJacobian {
    u: StiefelPoint,
    m_tilde: DMatrix<f64>,
    /// `G = I_d ⊗ k_block`.
    k_block: DMatrix<f64>,
    k_eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    b_sign: f64,
    stationarity: f64,
}

impl ImplicitJacobian {
    /// Builds the factored Jacobian at `u`, which should be a minimiser of
    /// `problem`. Fails when `G` or the Schur system `A G⁻¹ Aᵀ` is singular.
    pub fn new(problem: &NearestEtfProblem, u: &StiefelPoint) -> Result<Self> {
        if u.dims() != problem.dims() {
            return Err(Error::Dimension("solution shape differs from problem".into()));
        }
        let egrad = problem.euclidean_gradient(u.matrix());
        let curv = curvature_g(problem, u, &egrad)?;
        let k_block = curv.g.block;
        let k_eigen = k_block.clone().symmetric_eigen();
        let scale = k_eigen.eigenvalues.amax();
        let smallest = k_eigen.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(scale > 0.0) || smallest <= 1e-12 * scale {
            return Err(Error::SingularSystem(format!(
                "curvature matrix G is singular (|λ|_min = {smallest:.3e}, |λ|_max = {scale:.3e})"
            )));
        }
        let inv: Vec<f64> = k_eigen.eigenvalues.iter().map(|v| 1.0 / v).collect();
        let inv_scale = inv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for &a in &inv {
            for &b in &inv {
                if (a + b).abs() <= 1e-12 * inv_scale {
                    return Err(Error::SingularSystem(
                        "Schur complement A G⁻¹ Aᵀ is singular".into(),
                    ));
                }
            }
        }
        Ok(Self {
            u: u.clone(),
            m_tilde: problem.m_tilde().clone(),
            k_block,
            k_eigen,
            b_sign: 1.0,
            stationarity: curv.stationarity,
        })
    }

    /// Flips the sign of the mixed Hessian `B`. Only useful to check that
    /// derivative tests catch the error.
    #[doc(hidden)]
    pub fn with_corrupted_mixed_hessian(mut self) -> Self {
        self.b_sign = -self.b_sign;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        self.u.dims()
    }

    /// Riemannian gradient norm at the expansion point.
    pub fn stationarity(&self) -> f64 {
        self.stationarity
    }

    /// `None` when the expansion point meets the stationarity tolerance.
    pub fn stationarity_warning(&self) -> Option<String> {
        (self.stationarity > STATIONARITY_TOL).then(|| {
            format!(
                "expansion point is not stationary (Riemannian gradient norm {:.3e}); derivatives are approximate",
                self.stationarity
            )
        })
    }

    pub fn curvature_block(&self) -> &DMatrix<f64> {
        &self.k_block
    }

    fn k_inv_right(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let q = &self.k_eigen.eigenvectors;
        let mut t = v * q;
        for (j, lam) in self.k_eigen.eigenvalues.iter().enumerate() {
            t.column_mut(j).unscale_mut(*lam);
        }
        t * q.transpose()
    }

    /// Symmetric `Λ` with `K⁻¹Λ + ΛK⁻¹ = R`.
    fn solve_schur(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let q = &self.k_eigen.eigenvectors;
        let ev = &self.k_eigen.eigenvalues;
        let mut rh = q.transpose() * r * q;
        let c = ev.len();
        for i in 0..c {
            for j in 0..c {
                rh[(i, j)] /= 1.0 / ev[i] + 1.0 / ev[j];
            }
        }
        q * rh * q.transpose()
    }

    /// Projects `G⁻¹ v` (as a `d×C` matrix) onto the linearised constraint:
    /// returns `G⁻¹Aᵀ(AG⁻¹Aᵀ)⁻¹A G⁻¹ v − G⁻¹ v`.
    fn constrained_solve(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let u = self.u.matrix();
        let x = self.k_inv_right(v);
        let utx = u.transpose() * &x;
        let r = &utx + utx.transpose();
        let lambda = self.solve_schur(&r);
        self.k_inv_right(&(u * lambda)) - x
    }

    fn apply_b(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        v * &self.m_tilde * (-2.0 * self.b_sign)
    }

    /// `Dy · rvec(E)`: first-order change of `U*` when `H̃` moves by `E`.
    pub fn jvp(&self, direction: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(direction)?;
        Ok(self.constrained_solve(&self.apply_b(direction)))
    }

    /// `rvec⁻¹(Dyᵀ rvec(upstream))`: pulls a gradient with respect to `U*`
    /// back to a gradient with respect to `H̃`.
    pub fn vjp(&self, upstream: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(upstream)?;
        // G, B and the Schur system are symmetric, so Dyᵀ = B (constrained G⁻¹)
        Ok(self.apply_b(&self.constrained_solve(upstream)))
    }

    fn check_shape(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.shape() != self.dims() {
            return Err(Error::Dimension(format!(
                "expected a {:?} matrix, got {:?}",
                self.dims(),
                m.shape()
            )));
        }
        Ok(())
    }

    /// Dense `dC × dC` matrix, built column by column from [`Self::jvp`].
    pub fn materialize(&self) -> DMatrix<f64> {
        let (d, c) = self.dims();
        let n = d * c;
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = DMatrix::zeros(d, c);
            e[(k / c, k % c)] = 1.0;
            let col = rvec(&self.jvp(&e).expect("shape checked"));
            out.set_column(k, &col);
        }
        out
    }
}

/// Implicit Jacobian at a solution of `problem`.
pub fn dy_dh(problem: &NearestEtfProblem, u_star: &StiefelPoint) -> Result<ImplicitJacobian> {
    ImplicitJacobian::new(problem, u_star)
}

/// `Dy` evaluated literally with dense `A`, `B`, `G` and LU solves. Costs
/// `O((dC)³)`; reference implementation for small problems.
pub fn dy_dh_dense(problem: &NearestEtfProblem, u_star: &StiefelPoint) -> Result<DMatrix<f64>> {
    let a = constraint_jacobian(u_star)?;
    let b = mixed_hessian(problem).to_dense();
    let egrad = problem.euclidean_gradient(u_star.matrix());
    let g = curvature_g(problem, u_star, &egrad)?.g.to_dense();
    let g_lu = g.lu();
    let singular = || Error::SingularSystem("curvature matrix G is singular".into());
    let g_inv_b = g_lu.solve(&b).ok_or_else(singular)?;
    let g_inv_at = g_lu.solve(&a.transpose()).ok_or_else(singular)?;
    let schur = &a * &g_inv_at;
    let y = schur
        .lu()
        .solve(&(&a * &g_inv_b))
        .ok_or_else(|| Error::SingularSystem("Schur complement A G⁻¹ Aᵀ is singular".into()))?;
    Ok(g_inv_at * y - g_inv_b)
}

/// Convenience: `vjp` on a flat row-major upstream gradient.
pub fn vjp_rvec(jac: &ImplicitJacobian, upstream: &DVector<f64>) -> Result<DVector<f64>> {
    let (d, c) = jac.dims();
    let m = rvec_inv(upstream.as_slice(), d, c)?;
    Ok(rvec(&jac.vjp(&m)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nearest_etf::{solve_nearest_etf, DEFAULT_DELTA};
    use crate::stiefel::{project_to_tangent, TrustRegionOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn tight() -> TrustRegionOptions {
        TrustRegionOptions { tol: 1e-13, max_iter: 5000, ..Default::default() }
    }

    fn solved_instance(d: usize, c: usize, delta: f64, seed: u64) -> (NearestEtfProblem, StiefelPoint) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = gaussian(d, c, &mut rng);
        let prox = StiefelPoint::haar_random(d, c, &mut rng).unwrap();
        let p = NearestEtfProblem::new(&h / h.norm(), delta, prox.clone()).unwrap();
        let sol = solve_nearest_etf(&p, &prox, &tight()).unwrap();
        (p, sol.u_star)
    }

    #[test]
    fn constraint_jacobian_scalar() {
        for s in [1.0, -1.0] {
            let u = StiefelPoint::new(DMatrix::from_element(1, 1, s)).unwrap();
            assert_eq!(constraint_jacobian(&u).unwrap(), DMatrix::from_element(1, 1, 2.0 * s));
        }
    }

    #[test]
    fn constraint_jacobian_tangent_and_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let u = StiefelPoint::haar_random(4, 2, &mut rng).unwrap();
        let a = constraint_jacobian(&u).unwrap();
        assert_eq!(a.shape(), (3, 8));
        let z = project_to_tangent(&u, &gaussian(4, 2, &mut rng)).unwrap();
        assert!((&a * rvec(z.matrix())).norm() < 1e-10);
        let s = gaussian(2, 2, &mut rng);
        let s = &s + s.transpose();
        assert!((&a * rvec(&(u.matrix() * s))).norm() > 1e-3);
    }

    #[test]
    fn mixed_hessian_blocks() {
        let (p, _) = solved_instance(4, 2, DEFAULT_DELTA, 42);
        let b = mixed_hessian(&p).to_dense();
        let want = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        for i in 0..4 {
            for j in 0..4 {
                let blk = b.view((2 * i, 2 * j), (2, 2)).into_owned();
                if i == j {
                    assert!((blk - &want).norm() < 1e-15);
                } else {
                    assert_eq!(blk.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn mixed_hessian_matches_finite_differences() {
        for (d, c) in [(5, 3), (6, 4)] {
            let (p, u) = solved_instance(d, c, DEFAULT_DELTA, 43);
            let b = mixed_hessian(&p).to_dense();
            let eps = 1e-6;
            for k in 0..d {
                for l in 0..c {
                    let mut e = DMatrix::zeros(d, c);
                    e[(k, l)] = eps;
                    let up = p.perturbed(&e).unwrap().euclidean_gradient(u.matrix());
                    let dn = p.perturbed(&(-&e)).unwrap().euclidean_gradient(u.matrix());
                    let fd = rvec(&((up - dn) / (2.0 * eps)));
                    assert!((fd - b.column(k * c + l)).norm() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn sigma_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let u = StiefelPoint::haar_random(4, 2, &mut rng).unwrap();
        let s = sigma_matrix(u.matrix(), u.matrix()).unwrap();
        assert!((s - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        assert_eq!(sigma_matrix(u.matrix(), &DMatrix::zeros(4, 2)).unwrap(), DMatrix::zeros(2, 2));
        let g = gaussian(4, 2, &mut rng);
        let direct = sigma_matrix(u.matrix(), &g).unwrap();
        let via_gram = sigma_via_gram_determinants(u.matrix(), &g);
        assert!((direct - via_gram).norm() < 1e-12);
    }

    #[test]
    fn gram_determinant_is_power_of_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for c in 1..=4 {
            let u = StiefelPoint::haar_random(c + 2, c, &mut rng).unwrap();
            let det = constraint_gram(u.matrix()).determinant();
            let want = 2f64.powi((c * (c - 1) / 2) as i32);
            assert!((det - want).abs() <= 1e-8 * want);
        }
    }

    #[test]
    fn curvature_routes_agree() {
        for (d, c, seed) in [(3, 2, 46), (5, 3, 47), (6, 3, 48), (4, 1, 49)] {
            if c < 2 {
                continue;
            }
            let (p, u) = solved_instance(d, c, DEFAULT_DELTA, seed);
            let egrad = p.euclidean_gradient(u.matrix());
            let curv = curvature_g(&p, &u, &egrad).unwrap();
            assert!(curv.is_stationary());
            let g = curv.g.to_dense();
            assert!((&g - g.transpose()).norm() < 1e-10);
            let g2 = curvature_g_via_multipliers(&p, &u).unwrap();
            assert!((g - g2).norm() < 1e-8);
        }
    }

    #[test]
    fn curvature_in_prox_dominated_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let (d, c) = (6, 3);
        let h = gaussian(d, c, &mut rng);
        let prox = StiefelPoint::haar_random(d, c, &mut rng).unwrap();
        let p = NearestEtfProblem::new(&h / h.norm(), 1e3, prox.clone()).unwrap();
        let u = solve_nearest_etf(&p, &prox, &tight()).unwrap().u_star;
        let egrad = p.euclidean_gradient(u.matrix());
        let g = curvature_g(&p, &u, &egrad).unwrap().g.block;
        // K ≈ δ·sym(U_proxᵀU) once δ dominates
        let approx = sym(&(prox.matrix().transpose() * u.matrix())) * 1e3;
        assert!((&g - &approx).norm() <= 1e-2 * approx.norm());
    }

    #[test]
    fn structured_matches_dense_formula() {
        for (d, c, seed) in [(4, 2, 51), (6, 3, 52), (5, 5, 53)] {
            let (p, u) = solved_instance(d, c, DEFAULT_DELTA, seed);
            let jac = dy_dh(&p, &u).unwrap();
            let dense = dy_dh_dense(&p, &u).unwrap();
            let err = (jac.materialize() - &dense).norm();
            assert!(err <= 1e-8 * dense.norm(), "d={d} c={c} err={err}");
        }
    }

    #[test]
    fn columns_are_tangent() {
        let (p, u) = solved_instance(6, 3, DEFAULT_DELTA, 54);
        let a = constraint_jacobian(&u).unwrap();
        let dy = dy_dh(&p, &u).unwrap().materialize();
        assert!((&a * &dy).norm() <= 1e-8 * dy.norm().max(1.0));
    }

    #[test]
    fn jacobian_matches_resolve_finite_differences() {
        let (d, c) = (8, 3);
        let (p, u) = solved_instance(d, c, DEFAULT_DELTA, 55);
        let jac = dy_dh(&p, &u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let eps = 1e-5;
        for _ in 0..3 {
            let e = gaussian(d, c, &mut rng);
            let up = solve_nearest_etf(&p.perturbed(&(&e * eps)).unwrap(), &u, &tight()).unwrap();
            let dn = solve_nearest_etf(&p.perturbed(&(&e * -eps)).unwrap(), &u, &tight()).unwrap();
            let fd = (up.u_star.matrix() - dn.u_star.matrix()) / (2.0 * eps);
            let an = jac.jvp(&e).unwrap();
            let rel = (&fd - &an).norm() / an.norm();
            assert!(rel <= 1e-4, "relative error {rel}");
        }
    }

    fn resolve_fd_error(p: &NearestEtfProblem, u: &StiefelPoint, seed: u64) -> f64 {
        let jac = dy_dh(p, u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = p.dims();
        let e = gaussian(d, c, &mut rng);
        let eps = 1e-5;
        let up = solve_nearest_etf(&p.perturbed(&(&e * eps)).unwrap(), u, &tight()).unwrap();
        let dn = solve_nearest_etf(&p.perturbed(&(&e * -eps)).unwrap(), u, &tight()).unwrap();
        let fd = (up.u_star.matrix() - dn.u_star.matrix()) / (2.0 * eps);
        let an = jac.jvp(&e).unwrap();
        (&fd - &an).norm() / an.norm()
    }

    #[test]
    fn larger_delta_damps_sensitivity() {
        // once the proximal term dominates, ‖Dy‖ falls off like 1/δ
        let (p, _) = solved_instance(6, 3, DEFAULT_DELTA, 57);
        let mut prev = f64::INFINITY;
        let mut scaled = Vec::new();
        for delta in [1.0, 10.0, 100.0, 1000.0] {
            let q = p.with_delta(delta).unwrap();
            let u = solve_nearest_etf(&q, q.u_prox(), &tight()).unwrap().u_star;
            let n = dy_dh(&q, &u).unwrap().materialize().norm();
            assert!(n < prev);
            prev = n;
            scaled.push(n * delta);
        }
        let (a, b) = (scaled[2], scaled[3]);
        assert!((a - b).abs() <= 0.05 * b);
    }

    #[test]
    fn sensitivity_is_not_monotone_for_small_delta() {
        // weak damping can be outweighed by the shift of U* itself; the
        // derivative is still exact there
        let (p, _) = solved_instance(6, 3, DEFAULT_DELTA, 57);
        let norm_at = |delta: f64| {
            let q = p.with_delta(delta).unwrap();
            let u = solve_nearest_etf(&q, q.u_prox(), &tight()).unwrap().u_star;
            (dy_dh(&q, &u).unwrap().materialize().norm(), q, u)
        };
        let (n_small, _, _) = norm_at(1e-3);
        let (n_mid, q, u) = norm_at(0.3);
        assert!(n_mid > n_small);
        assert!(resolve_fd_error(&q, &u, 61) <= 1e-4);
    }

    #[test]
    fn vjp_cases() {
        let (d, c) = (5, 3);
        let (p, u) = solved_instance(d, c, DEFAULT_DELTA, 58);
        let jac = dy_dh(&p, &u).unwrap();
        assert_eq!(jac.vjp(&DMatrix::zeros(d, c)).unwrap().norm(), 0.0);
        let dense = jac.materialize();
        for k in [0, 4, 7, 14] {
            let mut e = DMatrix::zeros(d, c);
            e[(k / c, k % c)] = 1.0;
            let got = rvec(&jac.vjp(&e).unwrap());
            assert!((got - dense.row(k).transpose()).norm() < 1e-9 * dense.norm());
        }
        assert!(jac.vjp(&DMatrix::zeros(c, d)).is_err());
        let flat = vjp_rvec(&jac, &DVector::from_element(d * c, 1.0)).unwrap();
        assert_eq!(flat.len(), d * c);
    }

    #[test]
    fn corrupted_mixed_hessian_is_detected() {
        let (p, u) = solved_instance(6, 3, DEFAULT_DELTA, 59);
        let good = dy_dh(&p, &u).unwrap().materialize();
        let bad = dy_dh(&p, &u).unwrap().with_corrupted_mixed_hessian().materialize();
        assert!((good + bad).norm() < 1e-12);
    }

    #[test]
    fn stationarity_warning_off_solution() {
        let (p, _) = solved_instance(6, 3, DEFAULT_DELTA, 60);
        let far = StiefelPoint::canonical(6, 3).unwrap();
        if let Ok(jac) = dy_dh(&p, &far) {
            assert!(jac.stationarity_warning().is_some());
        }
    }
}
