//! Bilevel problem abstraction.
//!
//! A bilevel problem minimizes Phi(x) = f(x, y*(x)) where y*(x) solves the
//! lower-level convex program
//!
//! ```text
//!     min_y g(x, y)   s.t.   p(x, y) <= 0,   q(x, y) = 0,
//! ```
//!
//! with g strongly convex in y, each p_j convex in y, and q affine in y.
//! Every other module consumes problems through the [`BilevelProblem`] trait:
//! a bundle of value and derivative callbacks plus dimension metadata.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use thiserror::Error;

pub type DVec = nalgebra::DVector<f64>;
pub type DMat = nalgebra::DMatrix<f64>;

/// Errors from problem evaluation and validation plumbing.
#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value from {0}")]
    Evaluation(String),
    #[error("invalid problem data: {0}")]
    Invalid(String),
}

/// Callback bundle describing one bilevel problem instance.
///
/// All callbacks must be pure functions of their arguments (safe to call from
/// multiple threads). Derivative layout conventions:
///
/// - gradients of scalars are column vectors;
/// - `jac_y_p` is m x d_y (row j is the y-gradient of p_j), `jac_x_p` is m x d_x;
/// - `hess_xy_g[i][j]` = d^2 g / (dy_i dx_j), so the matrix is d_y x d_x;
/// - per-constraint Hessians follow the same convention.
///
/// Constraints default to empty / affine: a problem with m() = n() = 0 only
/// has to implement the objective callbacks, and affine constraints can skip
/// the constraint Hessians (the defaults return zeros).
pub trait BilevelProblem {
    fn d_x(&self) -> usize;
    fn d_y(&self) -> usize;
    /// Number of inequality constraints p(x,y) <= 0.
    fn m(&self) -> usize {
        0
    }
    /// Number of equality constraints q(x,y) = 0.
    fn n(&self) -> usize {
        0
    }
    /// Declared strong-convexity modulus of g in y (spot-verified, not proven).
    fn mu(&self) -> f64;

    /// True when g is quadratic and p, q affine in y at fixed x. Enables the
    /// direct KKT-factorization polish in the lower solver.
    fn is_qp(&self) -> bool {
        false
    }

    // Upper level.
    fn f(&self, x: &DVec, y: &DVec) -> f64;
    fn grad_x_f(&self, x: &DVec, y: &DVec) -> DVec;
    fn grad_y_f(&self, x: &DVec, y: &DVec) -> DVec;

    // Lower-level objective.
    fn g(&self, x: &DVec, y: &DVec) -> f64;
    fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec;
    fn hess_yy_g(&self, x: &DVec, y: &DVec) -> DMat;
    fn hess_xy_g(&self, x: &DVec, y: &DVec) -> DMat;

    // Inequality constraints.
    fn p(&self, _x: &DVec, _y: &DVec) -> DVec {
        assert_eq!(self.m(), 0, "p() not implemented but m() > 0");
        DVec::zeros(0)
    }
    fn jac_y_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        assert_eq!(self.m(), 0, "jac_y_p() not implemented but m() > 0");
        DMat::zeros(0, self.d_y())
    }
    fn jac_x_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        assert_eq!(self.m(), 0, "jac_x_p() not implemented but m() > 0");
        DMat::zeros(0, self.d_x())
    }
    /// Hessian in y of p_j; zero for constraints affine in y.
    fn hess_yy_p_j(&self, _j: usize, _x: &DVec, _y: &DVec) -> DMat {
        DMat::zeros(self.d_y(), self.d_y())
    }
    /// Cross Hessian d^2 p_j / dy dx; zero when jac_y_p is x-independent.
    fn hess_xy_p_j(&self, _j: usize, _x: &DVec, _y: &DVec) -> DMat {
        DMat::zeros(self.d_y(), self.d_x())
    }

    // Equality constraints (must be affine in y at fixed x).
    fn q(&self, _x: &DVec, _y: &DVec) -> DVec {
        assert_eq!(self.n(), 0, "q() not implemented but n() > 0");
        DVec::zeros(0)
    }
    fn jac_y_q(&self, _x: &DVec, _y: &DVec) -> DMat {
        assert_eq!(self.n(), 0, "jac_y_q() not implemented but n() > 0");
        DMat::zeros(0, self.d_y())
    }
    fn jac_x_q(&self, _x: &DVec, _y: &DVec) -> DMat {
        assert_eq!(self.n(), 0, "jac_x_q() not implemented but n() > 0");
        DMat::zeros(0, self.d_x())
    }
}

/// Lagrangian Hessians at (x, y) for multipliers (lambda, nu):
/// L(y, lambda, nu, x) = g + lambda' p + nu' q.
///
/// Since q is affine in y there is no second-order q term, so
/// hess_yy_L = hess_yy_g + sum_j lambda_j hess_yy_p_j and hess_xy_L is
/// assembled the same way from the cross Hessians.
pub fn evaluate_lagrangian_hessians(
    prob: &dyn BilevelProblem,
    x: &DVec,
    y: &DVec,
    lambda: &DVec,
    nu: &DVec,
) -> Result<(DMat, DMat), ProblemError> {
    if x.len() != prob.d_x() || y.len() != prob.d_y() {
        return Err(ProblemError::Dimension(format!(
            "x has {} entries (want {}), y has {} (want {})",
            x.len(),
            prob.d_x(),
            y.len(),
            prob.d_y()
        )));
    }
    if lambda.len() != prob.m() || nu.len() != prob.n() {
        return Err(ProblemError::Dimension(format!(
            "lambda has {} entries (want {}), nu has {} (want {})",
            lambda.len(),
            prob.m(),
            nu.len(),
            prob.n()
        )));
    }
    let bundle = DerivativeBundle::evaluate(prob, x, y);
    let (hyy, hxy) = lagrangian_hessians_from(&bundle, lambda);
    if hyy.iter().any(|v| !v.is_finite()) || hxy.iter().any(|v| !v.is_finite()) {
        return Err(ProblemError::Evaluation("Lagrangian Hessian callbacks".into()));
    }
    Ok((hyy, hxy))
}

/// Same assembly from an already-evaluated bundle (no re-query of callbacks).
pub fn lagrangian_hessians_from(bundle: &DerivativeBundle, lambda: &DVec) -> (DMat, DMat) {
    let mut hyy = bundle.hess_yy_g.clone();
    let mut hxy = bundle.hess_xy_g.clone();
    for j in 0..lambda.len() {
        if lambda[j] != 0.0 {
            hyy += lambda[j] * &bundle.hess_yy_p[j];
            hxy += lambda[j] * &bundle.hess_xy_p[j];
        }
    }
    (hyy, hxy)
}

/// All derivative evaluations the sensitivity and Clarke machinery need at one
/// point (x, y). Evaluated once and shared; see [`EvalCache`].
#[derive(Debug, Clone)]
pub struct DerivativeBundle {
    pub p: DVec,
    pub q: DVec,
    pub grad_x_f: DVec,
    pub grad_y_f: DVec,
    pub hess_yy_g: DMat,
    pub hess_xy_g: DMat,
    pub jac_y_p: DMat,
    pub jac_x_p: DMat,
    pub jac_y_q: DMat,
    pub jac_x_q: DMat,
    pub hess_yy_p: Vec<DMat>,
    pub hess_xy_p: Vec<DMat>,
}

impl DerivativeBundle {
    pub fn evaluate(prob: &dyn BilevelProblem, x: &DVec, y: &DVec) -> Self {
        let m = prob.m();
        Self {
            p: prob.p(x, y),
            q: prob.q(x, y),
            grad_x_f: prob.grad_x_f(x, y),
            grad_y_f: prob.grad_y_f(x, y),
            hess_yy_g: prob.hess_yy_g(x, y),
            hess_xy_g: prob.hess_xy_g(x, y),
            jac_y_p: prob.jac_y_p(x, y),
            jac_x_p: prob.jac_x_p(x, y),
            jac_y_q: prob.jac_y_q(x, y),
            jac_x_q: prob.jac_x_q(x, y),
            hess_yy_p: (0..m).map(|j| prob.hess_yy_p_j(j, x, y)).collect(),
            hess_xy_p: (0..m).map(|j| prob.hess_xy_p_j(j, x, y)).collect(),
        }
    }
}

/// Single-entry memo for the most recent (x, y) derivative bundle.
///
/// One outer iteration queries the same solved point from the sensitivity and
/// Clarke modules several times (once per subset S, plus the gradient and the
/// Lipschitz estimates); the cache collapses those into one callback sweep.
/// Per-solver-instance and single-threaded by design.
#[derive(Debug, Default)]
pub struct EvalCache {
    key: Option<u64>,
    bundle: Option<DerivativeBundle>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bundle(&mut self, prob: &dyn BilevelProblem, x: &DVec, y: &DVec) -> &DerivativeBundle {
        let key = point_key(x, y);
        if self.key != Some(key) || self.bundle.is_none() {
            self.bundle = Some(DerivativeBundle::evaluate(prob, x, y));
            self.key = Some(key);
        }
        self.bundle.as_ref().unwrap()
    }
}

fn point_key(x: &DVec, y: &DVec) -> u64 {
    let mut h = DefaultHasher::new();
    for v in x.iter().chain(y.iter()) {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

/// Outcome of one named validation check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Numerical audit of a problem instance against its structural assumptions.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult { name: name.to_string(), passed, detail });
    }
}

const FD_REL_TOL: f64 = 1e-5;
const TOL_PSD: f64 = 1e-8;

/// Checks derivative consistency, Hessian symmetry, strong convexity of g,
/// convexity of each p_j, and affineness of q in y at the given sample points.
///
/// The strong-convexity modulus mu is spot-verified here, not proven: a global
/// numerical verification is impossible, so the report records the minimum
/// eigenvalue seen across samples and compares it against mu - tol.
pub fn validate_problem(prob: &dyn BilevelProblem, sample_points: &[(DVec, DVec)]) -> ValidationReport {
    assert!(!sample_points.is_empty(), "need at least one sample point");
    let mut report = ValidationReport::default();

    let mut worst: Vec<(f64, String)> = vec![(0.0, String::new()); 7];
    let mut min_eig_g = f64::INFINITY;
    let mut sym_err: f64 = 0.0;
    let mut affine_err: f64 = 0.0;
    let mut min_eig_p = f64::INFINITY;

    for (idx, (x, y)) in sample_points.iter().enumerate() {
        let tag = |what: &str| format!("{what} at sample {idx}");

        // First derivatives against central differences of the values.
        let checks: [(usize, &str, f64); 5] = [
            (0, "grad_x_f", fd_err_vec(&prob.grad_x_f(x, y), &fd_grad(|t| prob.f(t, y), x))),
            (1, "grad_y_f", fd_err_vec(&prob.grad_y_f(x, y), &fd_grad(|t| prob.f(x, t), y))),
            (2, "grad_y_g", fd_err_vec(&prob.grad_y_g(x, y), &fd_grad(|t| prob.g(x, t), y))),
            (3, "jac_y_p", fd_err_mat(&prob.jac_y_p(x, y), &fd_jac(|t| prob.p(x, t), y, prob.m()))),
            (4, "jac_x_p", fd_err_mat(&prob.jac_x_p(x, y), &fd_jac(|t| prob.p(t, y), x, prob.m()))),
        ];
        for (slot, what, err) in checks {
            if err > worst[slot].0 {
                worst[slot] = (err, tag(what));
            }
        }

        // Second derivatives against central differences of the gradients.
        let hyy = prob.hess_yy_g(x, y);
        let hyy_fd = fd_jac(|t| prob.grad_y_g(x, t), y, prob.d_y());
        let e = fd_err_mat(&hyy, &hyy_fd);
        if e > worst[5].0 {
            worst[5] = (e, tag("hess_yy_g"));
        }
        let hxy = prob.hess_xy_g(x, y);
        let hxy_fd = fd_jac(|t| prob.grad_y_g(t, y), x, prob.d_y());
        let e = fd_err_mat(&hxy, &hxy_fd);
        if e > worst[6].0 {
            worst[6] = (e, tag("hess_xy_g"));
        }

        sym_err = sym_err.max(symmetry_error(&hyy));
        min_eig_g = min_eig_g.min(min_eigenvalue(&hyy));

        for j in 0..prob.m() {
            min_eig_p = min_eig_p.min(min_eigenvalue(&prob.hess_yy_p_j(j, x, y)));
        }

        // Affineness of q in y: exact agreement of secants with jac_y_q.
        if prob.n() > 0 {
            let step = DVec::from_fn(y.len(), |i, _| 0.37 + 0.11 * i as f64);
            let y2 = y + &step;
            let lhs = prob.q(x, &y2) - prob.q(x, y);
            let rhs = prob.jac_y_q(x, y) * &step;
            affine_err = affine_err.max((lhs - rhs).amax() / (1.0 + prob.q(x, y).amax()));

            let e = fd_err_mat(&prob.jac_y_q(x, y), &fd_jac(|t| prob.q(x, t), y, prob.n()));
            if e > worst[3].0 {
                worst[3] = (e, tag("jac_y_q"));
            }
            let e = fd_err_mat(&prob.jac_x_q(x, y), &fd_jac(|t| prob.q(t, y), x, prob.n()));
            if e > worst[4].0 {
                worst[4] = (e, tag("jac_x_q"));
            }
        }
    }

    let names = ["grad_x_f", "grad_y_f", "grad_y_g", "jac wrt y", "jac wrt x", "hess_yy_g", "hess_xy_g"];
    for (slot, name) in names.iter().enumerate() {
        let (err, at) = &worst[slot];
        report.push(
            &format!("derivative consistency: {name}"),
            *err <= FD_REL_TOL,
            format!("max relative error {err:.2e} ({at})"),
        );
    }
    report.push(
        "hess_yy_g symmetry",
        sym_err <= 1e-10,
        format!("max asymmetry {sym_err:.2e}"),
    );
    report.push(
        "strong convexity of g",
        min_eig_g >= prob.mu() - TOL_PSD,
        format!("min eigenvalue {min_eig_g:.3e} vs declared mu {:.3e}", prob.mu()),
    );
    if prob.m() > 0 {
        report.push(
            "convexity of p_j in y",
            min_eig_p >= -TOL_PSD,
            format!("min eigenvalue across constraints {min_eig_p:.3e}"),
        );
    }
    if prob.n() > 0 {
        report.push(
            "q affine in y",
            affine_err <= 1e-9,
            format!("max secant deviation {affine_err:.2e}"),
        );
    }
    report
}

fn symmetry_error(a: &DMat) -> f64 {
    (a - a.transpose()).amax()
}

/// Minimum eigenvalue of a symmetric matrix (symmetrized first to kill
/// round-off skew). Empty matrices count as unconstrained, +inf.
pub fn min_eigenvalue(a: &DMat) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = 0.5 * (a + a.transpose());
    sym.symmetric_eigen().eigenvalues.min()
}

pub(crate) fn fd_step(coord: f64) -> f64 {
    1e-6 * (1.0 + coord.abs())
}

/// Central-difference gradient of a scalar function.
pub(crate) fn fd_grad(f: impl Fn(&DVec) -> f64, at: &DVec) -> DVec {
    DVec::from_fn(at.len(), |i, _| {
        let h = fd_step(at[i]);
        let mut hi = at.clone();
        hi[i] += h;
        let mut lo = at.clone();
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    })
}

/// Central-difference Jacobian (rows = outputs) of a vector function.
pub(crate) fn fd_jac(f: impl Fn(&DVec) -> DVec, at: &DVec, rows: usize) -> DMat {
    let mut jac = DMat::zeros(rows, at.len());
    for i in 0..at.len() {
        let h = fd_step(at[i]);
        let mut hi = at.clone();
        hi[i] += h;
        let mut lo = at.clone();
        lo[i] -= h;
        let col = (f(&hi) - f(&lo)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

fn fd_err_vec(analytic: &DVec, fd: &DVec) -> f64 {
    (analytic - fd).amax() / (1.0 + fd.amax())
}

fn fd_err_mat(analytic: &DMat, fd: &DMat) -> f64 {
    (analytic - fd).amax() / (1.0 + fd.amax())
}

/// Finite-difference adaptor: builds a full [`BilevelProblem`] from value-only
/// callbacks. Prototyping convenience; analytic callbacks are always preferred
/// (second derivatives here carry O(h^(2/3)) noise).
pub struct FdAdapter<F, G, P, Q>
where
    F: Fn(&DVec, &DVec) -> f64,
    G: Fn(&DVec, &DVec) -> f64,
    P: Fn(&DVec, &DVec) -> DVec,
    Q: Fn(&DVec, &DVec) -> DVec,
{
    pub d_x: usize,
    pub d_y: usize,
    pub m: usize,
    pub n: usize,
    pub mu: f64,
    pub f: F,
    pub g: G,
    pub p: P,
    pub q: Q,
}

/// Wider step for nested differences: second derivatives lose half the digits.
fn fd_step2(coord: f64) -> f64 {
    5e-4 * (1.0 + coord.abs())
}

fn fd_jac_wide(f: impl Fn(&DVec) -> DVec, at: &DVec, rows: usize) -> DMat {
    let mut jac = DMat::zeros(rows, at.len());
    for i in 0..at.len() {
        let h = fd_step2(at[i]);
        let mut hi = at.clone();
        hi[i] += h;
        let mut lo = at.clone();
        lo[i] -= h;
        let col = (f(&hi) - f(&lo)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

impl<F, G, P, Q> BilevelProblem for FdAdapter<F, G, P, Q>
where
    F: Fn(&DVec, &DVec) -> f64,
    G: Fn(&DVec, &DVec) -> f64,
    P: Fn(&DVec, &DVec) -> DVec,
    Q: Fn(&DVec, &DVec) -> DVec,
{
    fn d_x(&self) -> usize {
        self.d_x
    }
    fn d_y(&self) -> usize {
        self.d_y
    }
    fn m(&self) -> usize {
        self.m
    }
    fn n(&self) -> usize {
        self.n
    }
    fn mu(&self) -> f64 {
        self.mu
    }

    fn f(&self, x: &DVec, y: &DVec) -> f64 {
        (self.f)(x, y)
    }
    fn grad_x_f(&self, x: &DVec, y: &DVec) -> DVec {
        fd_grad(|t| (self.f)(t, y), x)
    }
    fn grad_y_f(&self, x: &DVec, y: &DVec) -> DVec {
        fd_grad(|t| (self.f)(x, t), y)
    }

    fn g(&self, x: &DVec, y: &DVec) -> f64 {
        (self.g)(x, y)
    }
    fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
        fd_grad(|t| (self.g)(x, t), y)
    }
    fn hess_yy_g(&self, x: &DVec, y: &DVec) -> DMat {
        let h = fd_jac_wide(|t| fd_grad(|u| (self.g)(x, u), t), y, self.d_y);
        0.5 * (&h + h.transpose())
    }
    fn hess_xy_g(&self, x: &DVec, y: &DVec) -> DMat {
        fd_jac_wide(|t| fd_grad(|u| (self.g)(t, u), y), x, self.d_y)
    }

    fn p(&self, x: &DVec, y: &DVec) -> DVec {
        (self.p)(x, y)
    }
    fn jac_y_p(&self, x: &DVec, y: &DVec) -> DMat {
        fd_jac(|t| (self.p)(x, t), y, self.m)
    }
    fn jac_x_p(&self, x: &DVec, y: &DVec) -> DMat {
        fd_jac(|t| (self.p)(t, y), x, self.m)
    }
    fn hess_yy_p_j(&self, j: usize, x: &DVec, y: &DVec) -> DMat {
        let h = fd_jac_wide(|t| fd_grad(|u| (self.p)(x, u)[j], t), y, self.d_y);
        0.5 * (&h + h.transpose())
    }
    fn hess_xy_p_j(&self, j: usize, x: &DVec, y: &DVec) -> DMat {
        fd_jac_wide(|t| fd_grad(|u| (self.p)(t, u)[j], y), x, self.d_y)
    }

    fn q(&self, x: &DVec, y: &DVec) -> DVec {
        (self.q)(x, y)
    }
    fn jac_y_q(&self, x: &DVec, y: &DVec) -> DMat {
        fd_jac(|t| (self.q)(x, t), y, self.n)
    }
    fn jac_x_q(&self, x: &DVec, y: &DVec) -> DMat {
        fd_jac(|t| (self.q)(t, y), x, self.n)
    }
}
