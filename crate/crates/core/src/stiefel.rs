//! Stiefel manifold `St(d, C) = {U ∈ R^{d×C} : UᵀU = I}` and a Riemannian
//! trust-region minimiser on it.
//!
//! The manifold carries the Euclidean metric of its embedding. Tangent
//! vectors at `U` satisfy `UᵀZ + ZᵀU = 0`; the normal space is `{U S : S = Sᵀ}`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Orthonormality residual tolerated on every emitted point.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Tangency residual tolerated on tangent vectors.
pub const TANGENCY_TOL: f64 = 1e-10;

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `‖UᵀU − I‖_F`.
pub fn orthonormality_residual(u: &DMatrix<f64>) -> f64 {
    let c = u.ncols();
    (u.transpose() * u - DMatrix::<f64>::identity(c, c)).norm()
}

/// A `d×C` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint(DMatrix<f64>);

impl StiefelPoint {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (d, c) = matrix.shape();
        if c == 0 || d < c {
            return Err(Error::Dimension(format!(
                "Stiefel point needs d >= C >= 1, got {d}x{c}"
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite Stiefel point".into()));
        }
        let res = orthonormality_residual(&matrix);
        if res > ORTHONORMALITY_TOL {
            return Err(Error::Constraint(format!(
                "columns not orthonormal (residual {res:.3e})"
            )));
        }
        Ok(Self(matrix))
    }

    /// First `C` rows form the identity, remaining `d−C` rows are zero.
    pub fn canonical(d: usize, c: usize) -> Result<Self> {
        Self::new(DMatrix::identity(d, c))
    }

    /// Haar-distributed point: QR of a Gaussian matrix with the diagonal of
    /// `R` made positive.
    pub fn haar_random<R: Rng + ?Sized>(d: usize, c: usize, rng: &mut R) -> Result<Self> {
        if c == 0 || d < c {
            return Err(Error::Dimension(format!("need d >= C >= 1, got {d}x{c}")));
        }
        let g = DMatrix::from_fn(d, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::new(qf(g)?)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Q factor of the thin QR factorisation with positive `diag(R)`.
fn qf(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = a.ncols();
    let scale = a.norm().max(1.0);
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..c {
        let rjj = r[(j, j)];
        if !rjj.is_finite() || rjj.abs() <= 1e-13 * scale {
            return Err(Error::Numerical(format!(
                "rank collapse in QR retraction (|R[{j},{j}]| = {:.3e})",
                rjj.abs()
            )));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// A tangent vector together with its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: StiefelPoint,
    matrix: DMatrix<f64>,
}

impl TangentVector {
    pub fn new(base: StiefelPoint, matrix: DMatrix<f64>) -> Result<Self> {
        if base.dims() != matrix.shape() {
            return Err(Error::Dimension("tangent vector shape differs from base".into()));
        }
        let res = tangency_residual(base.matrix(), &matrix);
        if res > TANGENCY_TOL * (1.0 + matrix.norm()) {
            return Err(Error::Constraint(format!("not tangent (residual {res:.3e})")));
        }
        Ok(Self { base, matrix })
    }

    pub fn zero(base: StiefelPoint) -> Self {
        let (d, c) = base.dims();
        Self { base, matrix: DMatrix::zeros(d, c) }
    }

    pub fn base(&self) -> &StiefelPoint {
        &self.base
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm()
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self { base: self.base.clone(), matrix: &self.matrix * t }
    }
}

/// `‖UᵀZ + ZᵀU‖_F`.
pub fn tangency_residual(u: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
    let utz = u.transpose() * z;
    (&utz + utz.transpose()).norm()
}

fn project_mat(u: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    z - u * sym(&(u.transpose() * z))
}

/// Orthogonal projection onto the tangent space, `Z − U sym(UᵀZ)`.
pub fn project_to_tangent(u: &StiefelPoint, z: &DMatrix<f64>) -> Result<TangentVector> {
    if u.dims() != z.shape() {
        return Err(Error::Dimension(format!(
            "cannot project {:?} onto tangent space at {:?}",
            z.shape(),
            u.dims()
        )));
    }
    Ok(TangentVector { base: u.clone(), matrix: project_mat(u.matrix(), z) })
}

fn retract_mat(u: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.iter().all(|&x| x == 0.0) {
        return Ok(u.clone());
    }
    qf(u + z)
}

/// QR retraction `qf(U + Z)`.
pub fn retract(u: &StiefelPoint, z: &TangentVector) -> Result<StiefelPoint> {
    if u.dims() != z.matrix.shape() {
        return Err(Error::Dimension("retraction shape mismatch".into()));
    }
    StiefelPoint::new(retract_mat(u.matrix(), &z.matrix)?)
}

fn riemannian_gradient_mat(u: &DMatrix<f64>, egrad: &DMatrix<f64>) -> DMatrix<f64> {
    let sigma = sym(&(egrad.transpose() * u));
    egrad - u * sigma
}

/// Embedded gradient field `∇f(U) − U Σ(U)`, `Σ(U) = ½(∇f(U)ᵀU + Uᵀ∇f(U))`.
pub fn riemannian_gradient(u: &StiefelPoint, euclidean_grad: &DMatrix<f64>) -> Result<TangentVector> {
    if u.dims() != euclidean_grad.shape() {
        return Err(Error::Dimension("gradient shape differs from point".into()));
    }
    Ok(TangentVector {
        base: u.clone(),
        matrix: riemannian_gradient_mat(u.matrix(), euclidean_grad),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: StiefelPoint,
    pub objective_value: f64,
    pub riemannian_grad_norm: f64,
    /// Outer trust-region iterations.
    pub iterations: usize,
    /// Total truncated-CG iterations.
    pub inner_iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionOptions {
    /// Stop once the Riemannian gradient norm is at most this.
    pub tol: f64,
    pub max_iter: usize,
    pub initial_radius: f64,
    /// `None` means `√C`.
    pub max_radius: Option<f64>,
    pub accept_ratio: f64,
    /// `None` means `2·d·C`.
    pub max_inner: Option<usize>,
    /// Finite-difference step for Hessian actions, scaled by `1 + ‖U‖_F`.
    pub fd_step: f64,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            initial_radius: 1.0,
            max_radius: None,
            accept_ratio: 0.1,
            max_inner: None,
            fd_step: 1e-7,
        }
    }
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

struct Problem<'a, F, G> {
    objective: &'a F,
    grad: &'a G,
    fd_step: f64,
}

impl<F, G> Problem<'_, F, G>
where
    F: Fn(&DMatrix<f64>) -> f64,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    fn rgrad(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        riemannian_gradient_mat(u, &(self.grad)(u))
    }

    /// Hessian action by differencing the gradient field `∇f − U sym(Uᵀ∇f)`,
    /// which extends the Riemannian gradient off the manifold, along the
    /// straight line `U + tη` and projecting back onto the tangent space.
    fn hess(&self, u: &DMatrix<f64>, g_u: &DMatrix<f64>, eta: &DMatrix<f64>) -> DMatrix<f64> {
        let n = eta.norm();
        if n == 0.0 {
            return DMatrix::zeros(u.nrows(), u.ncols());
        }
        let t = self.fd_step * (1.0 + u.norm()) / n;
        let ut = u + eta * t;
        let gt = project_mat(u, &self.rgrad(&ut));
        (gt - g_u) / t
    }
}

struct TcgOutcome {
    eta: DMatrix<f64>,
    h_eta: DMatrix<f64>,
    iterations: usize,
    hit_boundary: bool,
}

/// Steihaug–Toint truncated conjugate gradient on the tangent space.
fn truncated_cg<F, G>(
    p: &Problem<'_, F, G>,
    u: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    radius: f64,
    max_inner: usize,
) -> Result<TcgOutcome>
where
    F: Fn(&DMatrix<f64>) -> f64,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let (d, c) = u.shape();
    let mut eta = DMatrix::zeros(d, c);
    let mut h_eta = DMatrix::zeros(d, c);
    let mut r = grad.clone();
    let mut rr = inner(&r, &r);
    let r0 = rr.sqrt();
    let stop = r0 * r0.min(0.1);
    let mut delta = -&r;
    let mut iterations = 0;

    while iterations < max_inner {
        iterations += 1;
        let h_delta = p.hess(u, grad, &delta);
        let kappa = inner(&delta, &h_delta);
        let alpha = rr / kappa;
        let eta_next = &eta + &delta * alpha;
        if kappa <= 0.0 || eta_next.norm() >= radius {
            // step to the boundary along delta
            let e_d = inner(&eta, &delta);
            let d_d = inner(&delta, &delta);
            let e_e = inner(&eta, &eta);
            let tau = (-e_d + (e_d * e_d + d_d * (radius * radius - e_e)).max(0.0).sqrt()) / d_d;
            eta += &delta * tau;
            h_eta += &h_delta * tau;
            return Ok(TcgOutcome { eta, h_eta, iterations, hit_boundary: true });
        }
        eta = eta_next;
        h_eta += &h_delta * alpha;
        r += &h_delta * alpha;
        r = project_mat(u, &r);
        let rr_next = inner(&r, &r);
        if rr_next.sqrt() <= stop {
            break;
        }
        let beta = rr_next / rr;
        rr = rr_next;
        delta = -&r + &delta * beta;
        delta = project_mat(u, &delta);
    }
    Ok(TcgOutcome { eta, h_eta, iterations, hit_boundary: false })
}

/// Riemannian trust-region minimisation with a truncated-CG inner solver.
///
/// `objective` and `euclidean_grad` receive points of the embedding space.
/// Hessian actions come from finite differences of the Riemannian gradient.
/// Running out of iterations returns an unconverged report rather than an
/// error.
pub fn trust_region_minimize<F, G>(
    objective: F,
    euclidean_grad: G,
    init: &StiefelPoint,
    opts: &TrustRegionOptions,
) -> Result<SolveReport>
where
    F: Fn(&DMatrix<f64>) -> f64,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    if !(opts.tol > 0.0) {
        return Err(Error::Domain("trust-region tolerance must be positive".into()));
    }
    let (d, c) = init.dims();
    let p = Problem { objective: &objective, grad: &euclidean_grad, fd_step: opts.fd_step };
    let max_radius = opts.max_radius.unwrap_or((c as f64).sqrt());
    let max_inner = opts.max_inner.unwrap_or(2 * d * c).max(1);
    let mut radius = opts.initial_radius.min(max_radius);

    let mut u = init.matrix().clone();
    let mut f = (p.objective)(&u);
    if !f.is_finite() {
        return Err(Error::Numerical("objective is not finite at the initial point".into()));
    }
    let mut g = p.rgrad(&u);
    let mut gn = g.norm();
    let mut iterations = 0;
    let mut inner_iterations = 0;

    while gn > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let step = truncated_cg(&p, &u, &g, radius, max_inner)?;
        inner_iterations += step.iterations;

        let candidate = match retract_mat(&u, &step.eta) {
            Ok(m) => m,
            Err(_) => {
                radius *= 0.25;
                continue;
            }
        };
        let f_candidate = (p.objective)(&candidate);
        if !f_candidate.is_finite() {
            return Err(Error::Numerical("objective became non-finite".into()));
        }
        let model_decrease = -(inner(&g, &step.eta) + 0.5 * inner(&step.eta, &step.h_eta));
        let actual_decrease = f - f_candidate;
        let noise = 1e3 * f64::EPSILON * f.abs().max(1.0);
        let rho = (actual_decrease + noise) / (model_decrease + noise);

        let mut accept = rho > opts.accept_ratio && actual_decrease >= 0.0;
        let mut g_candidate = None;
        if !accept && model_decrease.abs() < noise && actual_decrease > -noise {
            // The objective cannot resolve this step; judge it by the gradient.
            let gc = p.rgrad(&candidate);
            if gc.norm() < gn {
                accept = true;
                g_candidate = Some(gc);
            }
        }

        if rho < 0.25 {
            radius *= 0.25;
        } else if rho > 0.75 && step.hit_boundary {
            radius = (2.0 * radius).min(max_radius);
        }

        if accept {
            u = candidate;
            f = f_candidate;
            g = g_candidate.unwrap_or_else(|| p.rgrad(&u));
            gn = g.norm();
        }
        if radius < 1e-15 {
            break;
        }
    }

    // clean up drift accumulated by long runs
    if orthonormality_residual(&u) > 1e-12 {
        u = qf(u)?;
        f = (p.objective)(&u);
        gn = p.rgrad(&u).norm();
    }
    Ok(SolveReport {
        solution: StiefelPoint::new(u)?,
        objective_value: f,
        riemannian_grad_norm: gn,
        iterations,
        inner_iterations,
        converged: gn <= opts.tol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesSolution {
    pub point: StiefelPoint,
    /// Set when `σ_min(G) ≤ 1e-10·σ_max(G)`; the maximiser is then not unique.
    pub rank_deficient: bool,
    pub singular_values: Vec<f64>,
}

/// Closed-form maximiser of `Tr(GᵀU)` over the manifold: `U = P Qᵀ` from the
/// thin SVD `G = P Σ Qᵀ`.
pub fn procrustes_oracle(g: &DMatrix<f64>) -> Result<ProcrustesSolution> {
    let (d, c) = g.shape();
    if c == 0 || d < c {
        return Err(Error::Dimension(format!("need d >= C >= 1, got {d}x{c}")));
    }
    if g.norm() == 0.0 {
        return Err(Error::Domain("Procrustes target is zero".into()));
    }
    let svd = g.clone().svd(true, true);
    let p = svd.u.ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let qt = svd.v_t.ok_or_else(|| Error::Numerical("SVD did not return Vᵀ".into()))?;
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let mut u = p * qt;
    if orthonormality_residual(&u) > 1e-12 {
        u = qf(u)?;
    }
    Ok(ProcrustesSolution {
        point: StiefelPoint::new(u)?,
        rank_deficient: smin <= 1e-10 * smax,
        singular_values: sv,
    })
}
