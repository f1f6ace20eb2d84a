//! Oracle battery run by `netf validate`. Every check reports the measured
//! error next to its tolerance and how long it took.

use std::time::Instant;

use nalgebra::DMatrix;
use nearest_etf::ddn::{constraint_gram, curvature_g, curvature_g_via_multipliers, dy_dh, dy_dh_dense, sigma_matrix, sigma_via_gram_determinants};
use nearest_etf::etf::{theoretical_cosine_margin, unit_column_etf, NcMetricsRecord};
use nearest_etf::stiefel::{orthonormality_residual, procrustes_oracle};
use nearest_etf::ufm::{collapse_lower_bound, cross_entropy, etf_classifier, logits};
use nearest_etf::vectorisation::{kron, rvec, rvech, CommutationMatrix, EliminationMatrix};
use nearest_etf::{solve_nearest_etf, NearestEtfProblem, StiefelPoint, TrustRegionOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Flip the sign of the mixed Hessian `B` inside the implicit Jacobian;
    /// the finite-difference check must then fail.
    pub corrupt_mixed_hessian: bool,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// 0 when everything passed, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            3
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s += &format!(
                "{} {:<28} measured {:.3e}  tol {:.1e}  {:>8.3}s{}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.seconds,
                c.note.as_deref().map(|n| format!("  ({n})")).unwrap_or_default()
            );
        }
        s
    }
}

fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_problem(d: usize, c: usize, delta: f64, rng: &mut ChaCha8Rng) -> NearestEtfProblem {
    let h = gaussian(d, c, rng);
    let prox = StiefelPoint::haar_random(d, c, rng).expect("d >= c");
    NearestEtfProblem::new(&h / h.norm(), delta, prox).expect("valid instance")
}

fn tight() -> TrustRegionOptions {
    TrustRegionOptions { tol: 1e-12, max_iter: 5000, ..Default::default() }
}

type Measured = Result<(f64, Option<String>), String>;

fn procrustes_agreement() -> Measured {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut worst_orth = 0.0f64;
    for &(d, c) in &[(4, 2), (4, 3), (8, 3), (32, 10), (8, 8)] {
        for _ in 0..4 {
            let p = random_problem(d, c, 1e-3, &mut rng);
            let start = StiefelPoint::haar_random(d, c, &mut rng).map_err(|e| e.to_string())?;
            let sol = solve_nearest_etf(&p, &start, &TrustRegionOptions::default()).map_err(|e| e.to_string())?;
            let oracle = procrustes_oracle(&p.procrustes_target()).map_err(|e| e.to_string())?;
            worst = worst.max((p.objective(sol.u_star.matrix()) - p.objective(oracle.point.matrix())).abs());
            worst_orth = worst_orth.max(orthonormality_residual(sol.u_star.matrix()));
        }
    }
    if worst_orth > 1e-10 {
        return Err(format!("orthonormality residual {worst_orth:.1e}"));
    }
    Ok((worst, Some(format!("orthonormality {worst_orth:.1e}"))))
}

fn ddn_finite_differences(corrupt: bool) -> Measured {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (d, c) = (8, 3);
    let p = random_problem(d, c, 1e-3, &mut rng);
    let u = solve_nearest_etf(&p, p.u_prox(), &tight()).map_err(|e| e.to_string())?.u_star;
    let mut jac = dy_dh(&p, &u).map_err(|e| e.to_string())?;
    if corrupt {
        jac = jac.with_corrupted_mixed_hessian();
    }
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let e = gaussian(d, c, &mut rng);
        let solve = |s: f64| {
            let q = p.perturbed(&(&e * s)).map_err(|e| e.to_string())?;
            solve_nearest_etf(&q, &u, &tight()).map(|r| r.u_star.into_matrix()).map_err(|e| e.to_string())
        };
        let fd = (solve(eps)? - solve(-eps)?) / (2.0 * eps);
        let an = jac.jvp(&e).map_err(|e| e.to_string())?;
        worst = worst.max((&fd - &an).norm() / fd.norm());
    }
    Ok((worst, corrupt.then(|| "mixed Hessian sign flipped".into())))
}

fn ddn_structured_vs_dense() -> Measured {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for &(d, c) in &[(4, 2), (6, 3), (5, 5)] {
        let p = random_problem(d, c, 1e-3, &mut rng);
        let u = solve_nearest_etf(&p, p.u_prox(), &tight()).map_err(|e| e.to_string())?.u_star;
        let jac = dy_dh(&p, &u).map_err(|e| e.to_string())?.materialize();
        let dense = dy_dh_dense(&p, &u).map_err(|e| e.to_string())?;
        worst = worst.max((jac - &dense).norm() / dense.norm());
    }
    Ok((worst, None))
}

fn vectorisation_identities() -> Measured {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for &(m, n, p, q) in &[(2, 3, 4, 2), (3, 1, 2, 5), (4, 4, 4, 4)] {
        let a = gaussian(m, n, &mut rng);
        let b = gaussian(n, p, &mut rng);
        let c = gaussian(p, q, &mut rng);
        let lhs = rvec(&(&a * &b * &c));
        let rhs = kron(&a, &c.transpose()) * rvec(&b);
        worst = worst.max((&lhs - rhs).norm() / lhs.norm());
        let k = CommutationMatrix::new(p, n);
        worst = worst.max((k.apply(&rvec(&b)) - rvec(&b.transpose())).norm());
        let s = gaussian(n, n, &mut rng);
        let s = &s + s.transpose();
        worst = worst.max((EliminationMatrix::new(n).apply(&rvec(&s)) - rvech(&s)).norm());
    }
    Ok((worst, None))
}

fn multiplier_contraction() -> Measured {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for &(d, c) in &[(3, 2), (5, 3), (6, 3)] {
        let p = random_problem(d, c, 1e-3, &mut rng);
        let u = solve_nearest_etf(&p, p.u_prox(), &tight()).map_err(|e| e.to_string())?.u_star;
        let embedded = curvature_g(&p, &u, &p.euclidean_gradient(u.matrix())).map_err(|e| e.to_string())?.g.to_dense();
        let lagrange = curvature_g_via_multipliers(&p, &u).map_err(|e| e.to_string())?;
        worst = worst.max((embedded - &lagrange).norm() / lagrange.norm());
        let g = gaussian(d, c, &mut rng);
        let s1 = sigma_matrix(u.matrix(), &g).map_err(|e| e.to_string())?;
        worst = worst.max((s1 - sigma_via_gram_determinants(u.matrix(), &g)).norm());
    }
    Ok((worst, None))
}

fn gram_determinant() -> Measured {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst = 0.0f64;
    for c in 1..=4 {
        let u = StiefelPoint::haar_random(c + 2, c, &mut rng).map_err(|e| e.to_string())?;
        let want = 2f64.powi((c * (c - 1) / 2) as i32);
        worst = worst.max((constraint_gram(u.matrix()).determinant() - want).abs() / want);
    }
    Ok((worst, None))
}

fn collapse_fixed_point() -> Measured {
    let (d, c, tau) = (12, 10, 5.0);
    let u = StiefelPoint::canonical(d, c).map_err(|e| e.to_string())?;
    let vertices = u.matrix() * unit_column_etf(c).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = (0..3 * c).map(|i| i % c).collect();
    let h = DMatrix::from_fn(d, labels.len(), |r, i| vertices[(r, labels[i])]);
    let h_g = h.column_sum() / h.ncols() as f64;
    let (w, b) = etf_classifier(&u, &h_g).map_err(|e| e.to_string())?;
    let loss = cross_entropy(&logits(&w, &b, &h, tau), &labels);
    let bound = collapse_lower_bound(c, tau).map_err(|e| e.to_string())?;
    let m = NcMetricsRecord::compute(&w, &b, &h, &labels).map_err(|e| e.to_string())?;
    let worst = [
        (loss - bound).abs(),
        m.nc1,
        m.nc3,
        (m.mean_cosine_margin - theoretical_cosine_margin(c)).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok((worst, Some(format!("bound {bound:.6}"))))
}

fn timed(name: &'static str, tolerance: f64, f: impl FnOnce() -> Measured) -> CheckResult {
    let t = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| Err("check panicked".to_string()));
    let seconds = t.elapsed().as_secs_f64();
    match out {
        Ok((measured, note)) => {
            CheckResult { name, measured, tolerance, passed: measured <= tolerance, seconds, note }
        }
        Err(e) => CheckResult { name, measured: f64::NAN, tolerance, passed: false, seconds, note: Some(e) },
    }
}

pub fn validate_suite(opts: ValidateOptions) -> ValidationReport {
    ValidationReport {
        checks: vec![
            timed("procrustes_agreement", 1e-8, procrustes_agreement),
            timed("ddn_finite_differences", 1e-4, || ddn_finite_differences(opts.corrupt_mixed_hessian)),
            timed("ddn_structured_vs_dense", 1e-8, ddn_structured_vs_dense),
            timed("vectorisation_identities", 1e-12, vectorisation_identities),
            timed("lagrange_contraction", 1e-8, multiplier_contraction),
            timed("gram_determinant", 1e-8, gram_determinant),
            timed("collapse_fixed_point", 1e-10, collapse_fixed_point),
        ],
    }
}
