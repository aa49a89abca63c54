//! Lower-level solver: given x, solve
//!
//! ```text
//!     P(x):  min_y g(x, y)   s.t.  p(x, y) <= 0,  q(x, y) = 0
//! ```
//!
//! to high accuracy, returning the optimal point, the (unique, under LICQ)
//! multipliers, KKT residuals, and the active-set classification every
//! downstream module keys on.
//!
//! The engine is a primal-dual interior-point Newton method with
//! Mehrotra-style predictor-corrector centering. Problems that declare the
//! quadratic subclass ([`crate::BilevelProblem::is_qp`]) get an active-set
//! crossover polish afterwards: one symmetric indefinite factorization of the
//! equality-KKT system for the guessed active set, with drop/add corrections.
//! The polish is what pins degenerate multipliers to exact zeros instead of
//! interior-point dust.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::LdlFactor;
use crate::problem::{BilevelProblem, DMat, DVec, ProblemError};

#[derive(Debug, Clone)]
pub struct SolverOpts {
    /// KKT residual target (stationarity, feasibility, complementarity).
    pub tol_kkt: f64,
    /// Activity threshold for constraint classification; one order of
    /// magnitude above tol_kkt so classification is stable.
    pub tol_active: f64,
    pub max_iters: usize,
    /// Strict-interiority floor applied to warm-started multipliers/slacks.
    pub warm_floor: f64,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self { tol_kkt: 1e-9, tol_active: 1e-7, max_iters: 100, warm_floor: 1e-6 }
    }
}

/// Solution of P(x) at one x.
#[derive(Debug, Clone)]
pub struct LowerSolution {
    pub y_star: DVec,
    pub lambda: DVec,
    pub nu: DVec,
    /// max over stationarity, primal feasibility (p and q), and
    /// complementarity residuals at the returned point.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Smallest singular value of the stacked active-constraint Jacobian,
    /// relative to the largest; near-zero values warn of multiplier
    /// ill-conditioning before LicqViolation triggers.
    pub licq_min_singular: f64,
}

/// Active-set partition at a solved point.
///
/// `j` holds the active inequalities (|p_j| <= tol_active), `j_plus` the
/// strictly active ones (lambda_j > tol_active), `j_zero` the degenerate rest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ActiveSetClassification {
    pub j: Vec<usize>,
    pub j_plus: Vec<usize>,
    pub j_zero: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("lower level infeasible at this x: {0}")]
    InfeasibleLowerLevel(String),
    #[error("lower solver hit the iteration cap (kkt residual {:.3e})", .0.kkt_residual)]
    MaxIterations(Box<LowerSolution>),
    #[error("LICQ violated: active-gradient smallest singular value {sigma_min:.3e} below {threshold:.3e}")]
    LicqViolation { sigma_min: f64, threshold: f64 },
    #[error("Newton KKT system numerically singular at iteration {iter}")]
    SingularNewtonSystem { iter: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

struct Residuals {
    r_dual: DVec,
    r_pri: DVec,
    r_eq: DVec,
    merit: f64,
    mu: f64,
}

fn residuals(bundle_grad: &DVec, jp: &DMat, jq: &DMat, p: &DVec, q: &DVec, s: &DVec, lam: &DVec, nu: &DVec) -> Residuals {
    let m = lam.len();
    let r_dual = bundle_grad + jp.transpose() * lam + jq.transpose() * nu;
    let r_pri = p + s;
    let r_eq = q.clone();
    let mu = if m > 0 { lam.dot(s) / m as f64 } else { 0.0 };
    let comp = (0..m).map(|j| (lam[j] * s[j]).abs()).fold(0.0_f64, f64::max);
    let merit = r_dual.amax().max(if m > 0 { r_pri.amax() } else { 0.0 }).max(if r_eq.len() > 0 { r_eq.amax() } else { 0.0 }).max(comp);
    Residuals { r_dual, r_pri, r_eq, merit, mu }
}

/// Solves P(x). Warm starting shifts the previous solution to strict
/// interiority (multipliers and slacks floored at `opts.warm_floor`).
pub fn solve_lower(
    prob: &dyn BilevelProblem,
    x: &DVec,
    warm_start: Option<&LowerSolution>,
    opts: &SolverOpts,
) -> Result<LowerSolution, LowerError> {
    assert_eq!(x.len(), prob.d_x(), "x dimension mismatch");
    let d_y = prob.d_y();
    let m = prob.m();
    let n = prob.n();

    // Start point.
    let mut y = match warm_start {
        Some(w) => w.y_star.clone(),
        None => DVec::zeros(d_y),
    };
    let mut nu = match warm_start {
        Some(w) => w.nu.clone(),
        None => DVec::zeros(n),
    };
    let p0 = prob.p(x, &y);
    let mut lam = match warm_start {
        Some(w) => w.lambda.map(|v| v.max(opts.warm_floor)),
        None => DVec::from_element(m, 1.0),
    };
    let mut s = DVec::from_fn(m, |j, _| match warm_start {
        Some(_) => (-p0[j]).max(opts.warm_floor),
        None => (-p0[j]).max(1.0),
    });

    // Equality consistency certificate: q is affine in y, so feasibility of
    // the equality system is a least-squares question settled up front.
    if n > 0 {
        let jq = prob.jac_y_q(x, &y);
        let q0 = prob.q(x, &y);
        let svd = jq.clone().svd(true, true);
        let d = svd.solve(&(-&q0), 1e-12).map_err(|e| LowerError::InfeasibleLowerLevel(e.to_string()))?;
        let resid = (jq * &d + &q0).amax();
        if resid > 1e-8 * (1.0 + q0.amax()) {
            return Err(LowerError::InfeasibleLowerLevel(format!(
                "equality system inconsistent (least-squares residual {resid:.3e})"
            )));
        }
    }

    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..opts.max_iters {
        iterations = iter;
        let grad = prob.grad_y_g(x, &y);
        let p = prob.p(x, &y);
        let q = prob.q(x, &y);
        let jp = prob.jac_y_p(x, &y);
        let jq = prob.jac_y_q(x, &y);
        let res = residuals(&grad, &jp, &jq, &p, &q, &s, &lam, &nu);

        if res.merit <= opts.tol_kkt {
            converged = true;
            break;
        }

        // Hessian of the Lagrangian in y (positive definite: strong convexity
        // plus nonnegative multipliers on convex p_j).
        let mut h = prob.hess_yy_g(x, &y);
        for j in 0..m {
            if lam[j] != 0.0 {
                h += lam[j] * prob.hess_yy_p_j(j, x, &y);
            }
        }

        // Reduced saddle system in (dy, dnu); ds and dlam are eliminated.
        let mut kkt = DMat::zeros(d_y + n, d_y + n);
        {
            let mut h_aug = h.clone();
            for j in 0..m {
                let row = jp.row(j);
                let w = lam[j] / s[j];
                for a in 0..d_y {
                    for b in 0..=a {
                        let v = w * row[a] * row[b];
                        h_aug[(a, b)] += v;
                        if a != b {
                            h_aug[(b, a)] += v;
                        }
                    }
                }
            }
            kkt.view_mut((0, 0), (d_y, d_y)).copy_from(&h_aug);
            if n > 0 {
                kkt.view_mut((d_y, 0), (n, d_y)).copy_from(&jq);
                kkt.view_mut((0, d_y), (d_y, n)).copy_from(&jq.transpose());
            }
        }
        let factor = LdlFactor::new(&kkt).map_err(|_| LowerError::SingularNewtonSystem { iter })?;

        let solve_step = |factor: &LdlFactor, r_c: &DVec| -> (DVec, DVec, DVec, DVec) {
            // rhs_y = -r_dual - J_p' * ( (-r_c + lam .* r_pri) ./ s )
            let mut w = DVec::zeros(m);
            for j in 0..m {
                w[j] = (-r_c[j] + lam[j] * res.r_pri[j]) / s[j];
            }
            let rhs_y = -&res.r_dual - jp.transpose() * &w;
            let mut rhs = DVec::zeros(d_y + n);
            rhs.rows_mut(0, d_y).copy_from(&rhs_y);
            for k in 0..n {
                rhs[d_y + k] = -res.r_eq[k];
            }
            let sol = factor.solve_vec(&rhs);
            let dy = DVec::from_column_slice(&sol.as_slice()[0..d_y]);
            let dnu = DVec::from_column_slice(&sol.as_slice()[d_y..d_y + n]);
            let ds = -&res.r_pri - &jp * &dy;
            let mut dlam = DVec::zeros(m);
            for j in 0..m {
                dlam[j] = (-r_c[j] - lam[j] * ds[j]) / s[j];
            }
            (dy, ds, dlam, dnu)
        };

        let max_step = |v: &DVec, dv: &DVec| -> f64 {
            let mut a: f64 = 1.0;
            for j in 0..v.len() {
                if dv[j] < 0.0 {
                    a = a.min(-v[j] / dv[j]);
                }
            }
            a
        };

        // Predictor (affine scaling).
        let r_c_aff = DVec::from_fn(m, |j, _| lam[j] * s[j]);
        let (dy_a, ds_a, dlam_a, dnu_a) = solve_step(&factor, &r_c_aff);
        let (dy, ds, dlam, dnu, sigma_mu) = if m > 0 {
            let a_p = max_step(&s, &ds_a);
            let a_d = max_step(&lam, &dlam_a);
            let mu_aff = {
                let s_t = &s + a_p * &ds_a;
                let l_t = &lam + a_d * &dlam_a;
                s_t.dot(&l_t) / m as f64
            };
            let sigma = if res.mu > 0.0 { (mu_aff / res.mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };
            // Corrector with centering.
            let r_c = DVec::from_fn(m, |j, _| lam[j] * s[j] + ds_a[j] * dlam_a[j] - sigma * res.mu);
            let step = solve_step(&factor, &r_c);
            (step.0, step.1, step.2, step.3, sigma * res.mu)
        } else {
            (dy_a, ds_a, dlam_a, dnu_a, 0.0)
        };
        let _ = sigma_mu;

        let tau = 0.995;
        let a_p = (tau * max_step(&s, &ds)).min(1.0);
        let a_d = (tau * max_step(&lam, &dlam)).min(1.0);

        // Nonlinear safeguard: back off until the KKT merit stops increasing.
        // QP-in-y problems accept the full step; the backtracking only bites
        // when p or g has curvature strong enough to invalidate the
        // linearization.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let y_t = &y + scale * a_p * &dy;
            let s_t = &s + scale * a_p * &ds;
            let lam_t = &lam + scale * a_d * &dlam;
            let nu_t = &nu + scale * a_d * &dnu;
            let grad_t = prob.grad_y_g(x, &y_t);
            let p_t = prob.p(x, &y_t);
            let q_t = prob.q(x, &y_t);
            let jp_t = prob.jac_y_p(x, &y_t);
            let jq_t = prob.jac_y_q(x, &y_t);
            let res_t = residuals(&grad_t, &jp_t, &jq_t, &p_t, &q_t, &s_t, &lam_t, &nu_t);
            if res_t.merit <= res.merit * (1.0 - 1e-4 * scale) + 1e-16 || res_t.merit <= opts.tol_kkt {
                y = y_t;
                s = s_t;
                lam = lam_t;
                nu = nu_t;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No productive step: either converged to the achievable floor or
            // the problem is infeasible.
            break;
        }

        if lam.amax() > 1e10 && res.r_pri.amax() > 1e-6 {
            return Err(LowerError::InfeasibleLowerLevel(format!(
                "diverging multipliers (|lambda| {:.3e}) with primal residual {:.3e}",
                lam.amax(),
                res.r_pri.amax()
            )));
        }
    }

    let mut sol = finish_solution(prob, x, y, lam, nu, iterations, converged, opts)?;

    if prob.is_qp() {
        if let Some(polished) = qp_polish(prob, x, &sol, opts) {
            if polished.kkt_residual <= sol.kkt_residual.max(opts.tol_kkt) {
                sol = polished;
            }
        }
    }

    if !sol.converged {
        return Err(LowerError::MaxIterations(Box::new(sol)));
    }
    licq_check(prob, x, &mut sol, opts)?;
    Ok(sol)
}

/// Exact KKT residuals at a candidate (y, lambda, nu), with multiplier
/// truncation below tol_active (matching exact complementarity).
fn finish_solution(
    prob: &dyn BilevelProblem,
    x: &DVec,
    y: DVec,
    mut lam: DVec,
    nu: DVec,
    iterations: usize,
    converged_hint: bool,
    opts: &SolverOpts,
) -> Result<LowerSolution, LowerError> {
    for j in 0..lam.len() {
        if lam[j] < opts.tol_active {
            lam[j] = 0.0;
        }
    }
    let residual = kkt_residual(prob, x, &y, &lam, &nu);
    if !residual.is_finite() {
        return Err(ProblemError::Evaluation("KKT residual".into()).into());
    }
    let converged = converged_hint || residual <= opts.tol_kkt;
    Ok(LowerSolution {
        y_star: y,
        lambda: lam,
        nu,
        kkt_residual: residual,
        iterations,
        converged,
        licq_min_singular: f64::INFINITY,
    })
}

/// max-norm KKT residual: stationarity, p/q feasibility, complementarity.
pub fn kkt_residual(prob: &dyn BilevelProblem, x: &DVec, y: &DVec, lam: &DVec, nu: &DVec) -> f64 {
    let p = prob.p(x, y);
    let q = prob.q(x, y);
    let stat = (prob.grad_y_g(x, y) + prob.jac_y_p(x, y).transpose() * lam + prob.jac_y_q(x, y).transpose() * nu).amax();
    let feas_p = (0..p.len()).map(|j| p[j].max(0.0)).fold(0.0_f64, f64::max);
    let feas_q = if q.len() > 0 { q.amax() } else { 0.0 };
    let comp = (0..p.len()).map(|j| (lam[j] * p[j]).abs()).fold(0.0_f64, f64::max);
    let dual = (0..lam.len()).map(|j| (-lam[j]).max(0.0)).fold(0.0_f64, f64::max);
    stat.max(feas_p).max(feas_q).max(comp).max(dual)
}

/// Active-set crossover for the quadratic subclass: factor the equality-KKT
/// system for the primal-active guess, then drop negative multipliers / add
/// violated rows until the sign conditions hold. Returns None when the guess
/// cannot be stabilized (caller keeps the interior-point answer).
fn qp_polish(prob: &dyn BilevelProblem, x: &DVec, sol: &LowerSolution, opts: &SolverOpts) -> Option<LowerSolution> {
    let d_y = prob.d_y();
    let m = prob.m();
    let n = prob.n();
    let y_ref = &sol.y_star;

    // Quadratic data extracted at the reference point: g(y) = 1/2 y'H y + c'y + const.
    let h = prob.hess_yy_g(x, y_ref);
    let c = prob.grad_y_g(x, y_ref) - &h * y_ref;
    let jp = prob.jac_y_p(x, y_ref);
    let p0 = prob.p(x, y_ref) - &jp * y_ref;
    let jq = prob.jac_y_q(x, y_ref);
    let q0 = prob.q(x, y_ref) - &jq * y_ref;

    let mut active: Vec<usize> = (0..m)
        .filter(|&j| prob.p(x, y_ref)[j] >= -opts.tol_active || sol.lambda[j] > opts.tol_active)
        .collect();

    for _ in 0..(2 * m + 5) {
        let na = active.len();
        let dim = d_y + na + n;
        let mut kkt = DMat::zeros(dim, dim);
        kkt.view_mut((0, 0), (d_y, d_y)).copy_from(&h);
        for (r, &j) in active.iter().enumerate() {
            for col in 0..d_y {
                kkt[(d_y + r, col)] = jp[(j, col)];
                kkt[(col, d_y + r)] = jp[(j, col)];
            }
        }
        for r in 0..n {
            for col in 0..d_y {
                kkt[(d_y + na + r, col)] = jq[(r, col)];
                kkt[(col, d_y + na + r)] = jq[(r, col)];
            }
        }
        let mut rhs = DVec::zeros(dim);
        rhs.rows_mut(0, d_y).copy_from(&(-&c));
        for (r, &j) in active.iter().enumerate() {
            rhs[d_y + r] = -p0[j];
        }
        for r in 0..n {
            rhs[d_y + na + r] = -q0[r];
        }

        let factor = LdlFactor::new(&kkt).ok()?;
        let z = factor.solve_vec(&rhs);
        let y = DVec::from_column_slice(&z.as_slice()[0..d_y]);
        let lam_a = DVec::from_column_slice(&z.as_slice()[d_y..d_y + na]);
        let nu = DVec::from_column_slice(&z.as_slice()[d_y + na..dim]);

        // Drop the most negative multiplier, if any.
        let mut worst = (None, -1e-10_f64);
        for (r, &j) in active.iter().enumerate() {
            if lam_a[r] < worst.1 {
                worst = (Some(j), lam_a[r]);
            }
        }
        if let (Some(j), _) = worst {
            active.retain(|&a| a != j);
            continue;
        }

        // Add the most violated inactive constraint, if any.
        let p_val = &jp * &y + &p0;
        let mut add = (None, opts.tol_kkt.max(1e-12));
        for j in 0..m {
            if !active.contains(&j) && p_val[j] > add.1 {
                add = (Some(j), p_val[j]);
            }
        }
        if let (Some(j), _) = add {
            active.push(j);
            active.sort_unstable();
            continue;
        }

        let mut lam = DVec::zeros(m);
        for (r, &j) in active.iter().enumerate() {
            lam[j] = lam_a[r].max(0.0);
        }
        let residual = kkt_residual(prob, x, &y, &lam, &nu);
        return Some(LowerSolution {
            y_star: y,
            lambda: lam,
            nu,
            kkt_residual: residual,
            iterations: sol.iterations,
            converged: residual <= opts.tol_kkt,
            licq_min_singular: f64::INFINITY,
        });
    }
    None
}

fn licq_check(prob: &dyn BilevelProblem, x: &DVec, sol: &mut LowerSolution, opts: &SolverOpts) -> Result<(), LowerError> {
    let p = prob.p(x, &sol.y_star);
    let active: Vec<usize> = (0..prob.m()).filter(|&j| p[j].abs() <= opts.tol_active).collect();
    let rows = active.len() + prob.n();
    if rows == 0 {
        sol.licq_min_singular = f64::INFINITY;
        return Ok(());
    }
    let jp = prob.jac_y_p(x, &sol.y_star);
    let jq = prob.jac_y_q(x, &sol.y_star);
    let mut stack = DMat::zeros(rows, prob.d_y());
    for (r, &j) in active.iter().enumerate() {
        stack.row_mut(r).copy_from(&jp.row(j));
    }
    for k in 0..prob.n() {
        stack.row_mut(active.len() + k).copy_from(&jq.row(k));
    }
    let sv = stack.svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let threshold = 1e-8 * smax;
    if rows > prob.d_y() || smin < threshold {
        return Err(LowerError::LicqViolation { sigma_min: smin, threshold });
    }
    sol.licq_min_singular = if smax > 0.0 { smin / smax } else { 0.0 };
    Ok(())
}

/// Partition of the inequality constraints at a solved point (see
/// [`ActiveSetClassification`]). Deterministic for fixed tolerances.
pub fn classify_active_sets(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    tol_active: f64,
) -> ActiveSetClassification {
    assert!(sol.converged, "classification requires a converged solution");
    let p = prob.p(x, &sol.y_star);
    let mut cls = ActiveSetClassification::default();
    for j in 0..prob.m() {
        if p[j].abs() <= tol_active {
            cls.j.push(j);
            if sol.lambda[j] > tol_active {
                cls.j_plus.push(j);
            } else {
                cls.j_zero.push(j);
            }
        }
    }
    cls
}

/// Convenience: the upper objective at the solved lower level, Phi(x) = f(x, y*(x)).
pub fn phi(prob: &dyn BilevelProblem, x: &DVec, sol: &LowerSolution) -> f64 {
    prob.f(x, &sol.y_star)
}
