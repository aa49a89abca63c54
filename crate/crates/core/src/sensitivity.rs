//! Sensitivity of the lower-level solution map.
//!
//! At a point where strict complementarity holds (every active inequality has
//! a strictly positive multiplier), the KKT system of P(x) defines y*(x),
//! lambda(x), nu(x) implicitly, and differentiating it gives the linear system
//!
//! ```text
//!     [ H    R_y' ] [ dy*/dx ]     [ hess_xy_L ]
//!     [ R_y  0    ] [ dmult  ]  = -[ R_x       ]
//! ```
//!
//! where H is the Lagrangian Hessian in y, and R_y / R_x stack the y- and
//! x-Jacobian rows of the pinned constraints (strictly active inequalities
//! plus all equalities). The same solve with a different row set produces the
//! representative gradients used by the subdifferential construction: pinning
//! extra rows answers "what would the derivative be if these constraints
//! stayed active".
//!
//! Two backends solve the saddle system: a dense symmetric-indefinite
//! factorization, and conjugate gradients on the positive definite H block
//! with a small Schur complement for the multipliers. The CG path avoids
//! forming or factoring the full system and wins once d_y is large.

use thiserror::Error;

use crate::linalg::{cg_solve, LdlFactor, LinalgError};
use crate::lower::{classify_active_sets, solve_lower, ActiveSetClassification, LowerError, LowerSolution, SolverOpts};
use crate::problem::{lagrangian_hessians_from, BilevelProblem, DMat, DVec, DerivativeBundle};

/// Dimension above which the CG backend is selected by default.
pub const CG_DIM_THRESHOLD: usize = 200;
/// Relative residual target for the CG backend.
pub const CG_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("strict complementarity fails: degenerate active constraints {j_zero:?}")]
    ScscViolated { j_zero: Vec<usize> },
    #[error("KKT sensitivity matrix is singular")]
    SingularKktMatrix,
    #[error("Schur complement singular: pinned constraint rows are dependent")]
    SingularSchur,
    #[error("CG stalled at residual {residual:.3e} (target {target:.3e})")]
    CgStalled { residual: f64, target: f64 },
    #[error("probe solve for degenerate constraints failed: {0}")]
    ProbeFailed(String),
}

impl From<LinalgError> for SensitivityError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Singular { .. } => SensitivityError::SingularKktMatrix,
            LinalgError::CgStalled { residual, target } => SensitivityError::CgStalled { residual, target },
        }
    }
}

/// Derivatives of the solution map at one x.
///
/// `grad_lambda` always has m rows; rows of inequalities that were not pinned
/// are identically zero (locally inactive constraints keep zero multipliers).
#[derive(Debug, Clone)]
pub struct KktSensitivity {
    /// d_y x d_x
    pub grad_y_star: DMat,
    /// m x d_x
    pub grad_lambda: DMat,
    /// n x d_x
    pub grad_nu: DMat,
    /// Inequality rows pinned in the solve, ascending.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum SaddleMethod {
    Dense,
    Cg { tol: f64 },
}

impl SaddleMethod {
    /// Dense below [`CG_DIM_THRESHOLD`], CG above.
    pub fn auto(d_y: usize) -> Self {
        if d_y > CG_DIM_THRESHOLD {
            SaddleMethod::Cg { tol: CG_TOL }
        } else {
            SaddleMethod::Dense
        }
    }
}

/// Solves the saddle system
///
/// ```text
///     [ H    R_y' ] [ z_top  ]     [ rhs_top ]
///     [ R_y  0    ] [ z_mult ] = - [ r_x     ]
/// ```
///
/// returning (z_top, z_mult). The CG backend eliminates the H block:
/// with A = H^-1 rhs_top and B = H^-1 R_y', the multipliers solve the
/// dense Schur system (R_y B) w = R_y A - r_x and z_top = -A + B w.
pub fn solve_saddle_block(
    h: &DMat,
    r_y: &DMat,
    rhs_top: &DMat,
    r_x: &DMat,
    method: SaddleMethod,
) -> Result<(DMat, DMat), SensitivityError> {
    let d_y = h.nrows();
    let rows = r_y.nrows();
    let nrhs = rhs_top.ncols();
    debug_assert_eq!(r_x.nrows(), rows);
    debug_assert_eq!(r_x.ncols(), nrhs);

    match method {
        SaddleMethod::Dense => {
            let dim = d_y + rows;
            let mut m = DMat::zeros(dim, dim);
            m.view_mut((0, 0), (d_y, d_y)).copy_from(h);
            if rows > 0 {
                m.view_mut((d_y, 0), (rows, d_y)).copy_from(r_y);
                m.view_mut((0, d_y), (d_y, rows)).copy_from(&r_y.transpose());
            }
            let mut rhs = DMat::zeros(dim, nrhs);
            rhs.view_mut((0, 0), (d_y, nrhs)).copy_from(&(-rhs_top));
            rhs.view_mut((d_y, 0), (rows, nrhs)).copy_from(&(-r_x));
            let factor = LdlFactor::new(&m)?;
            let z = factor.solve_mat(&rhs);
            Ok((z.view((0, 0), (d_y, nrhs)).into(), z.view((d_y, 0), (rows, nrhs)).into()))
        }
        SaddleMethod::Cg { tol } => {
            let solve_cols = |b: &DMat| -> Result<DMat, SensitivityError> {
                let mut out = DMat::zeros(d_y, b.ncols());
                for c in 0..b.ncols() {
                    let col = cg_solve(h, &b.column(c).into(), tol)?;
                    out.set_column(c, &col);
                }
                Ok(out)
            };
            let a = solve_cols(rhs_top)?;
            if rows == 0 {
                return Ok((-a, DMat::zeros(0, nrhs)));
            }
            let b = solve_cols(&r_y.transpose())?;
            let mut schur = r_y * &b;
            // Symmetrize away CG noise before factoring.
            schur = 0.5 * (&schur + schur.transpose());
            let factor = LdlFactor::new(&schur).map_err(|_| SensitivityError::SingularSchur)?;
            let w = factor.solve_mat(&(r_y * &a - r_x));
            Ok((-&a + &b * &w, -w))
        }
    }
}

/// Differentiates the KKT system with the given inequality rows pinned as
/// equalities (all equality constraints are always pinned). `rows` must be
/// ascending and each row's constraint active or nearly so for the result to
/// mean anything; the function itself only requires the system to be
/// nonsingular.
pub fn sensitivity_for_rows(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    rows: &[usize],
    method: SaddleMethod,
) -> Result<KktSensitivity, SensitivityError> {
    let d_x = prob.d_x();
    let d_y = prob.d_y();
    let m = prob.m();
    let n = prob.n();
    debug_assert!(rows.windows(2).all(|w| w[0] < w[1]), "rows must be ascending");

    let bundle = DerivativeBundle::evaluate(prob, x, &sol.y_star);
    let (h, hess_xy_l) = lagrangian_hessians_from(&bundle, &sol.lambda);

    let total = rows.len() + n;
    let mut r_y = DMat::zeros(total, d_y);
    let mut r_x = DMat::zeros(total, d_x);
    for (r, &j) in rows.iter().enumerate() {
        r_y.row_mut(r).copy_from(&bundle.jac_y_p.row(j));
        r_x.row_mut(r).copy_from(&bundle.jac_x_p.row(j));
    }
    if n > 0 {
        r_y.view_mut((rows.len(), 0), (n, d_y)).copy_from(&bundle.jac_y_q);
        r_x.view_mut((rows.len(), 0), (n, d_x)).copy_from(&bundle.jac_x_q);
    }

    let (z_top, z_mult) = solve_saddle_block(&h, &r_y, &hess_xy_l, &r_x, method)?;

    let mut grad_lambda = DMat::zeros(m, d_x);
    for (r, &j) in rows.iter().enumerate() {
        grad_lambda.row_mut(j).copy_from(&z_mult.row(r));
    }
    let grad_nu: DMat = z_mult.view((rows.len(), 0), (n, d_x)).into();
    Ok(KktSensitivity { grad_y_star: z_top, grad_lambda, grad_nu, rows: rows.to_vec() })
}

/// Solution-map derivative at a strictly complementary point: pins exactly
/// the strictly active inequalities. Errors with the degenerate indices when
/// strict complementarity fails (the solution map need not be differentiable
/// there; use [`directional_derivative`] or the subdifferential machinery).
pub fn kkt_gradient(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    cls: &ActiveSetClassification,
) -> Result<KktSensitivity, SensitivityError> {
    if !cls.j_zero.is_empty() {
        return Err(SensitivityError::ScscViolated { j_zero: cls.j_zero.clone() });
    }
    sensitivity_for_rows(prob, x, sol, &cls.j_plus, SaddleMethod::auto(prob.d_y()))
}

/// Gradient of Phi(x) = f(x, y*(x)) by the chain rule.
pub fn phi_gradient(prob: &dyn BilevelProblem, x: &DVec, sol: &LowerSolution, sens: &KktSensitivity) -> DVec {
    prob.grad_x_f(x, &sol.y_star) + sens.grad_y_star.transpose() * prob.grad_y_f(x, &sol.y_star)
}

/// Representative gradient for one pinned row set: the value grad Phi would
/// take if exactly these inequality rows (plus the equalities) stayed active.
pub fn representative_gradient(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    rows: &[usize],
    method: SaddleMethod,
) -> Result<DVec, SensitivityError> {
    let sens = sensitivity_for_rows(prob, x, sol, rows, method)?;
    Ok(phi_gradient(prob, x, sol, &sens))
}

#[derive(Debug, Clone)]
pub struct DirectionalOpts {
    /// Probe step is `probe_scale * (1 + |x|)` along the direction.
    pub probe_scale: f64,
    pub lower: SolverOpts,
}

impl Default for DirectionalOpts {
    fn default() -> Self {
        Self { probe_scale: 1e-6, lower: SolverOpts::default() }
    }
}

/// One-sided directional derivative of the solution map along d.
#[derive(Debug, Clone)]
pub struct DirectionalDerivative {
    pub dy_star: DVec,
    pub dlambda: DVec,
    pub dnu: DVec,
    /// Phi'(x; d)
    pub dphi: f64,
    /// Inequality rows pinned after probing: strictly active ones plus the
    /// degenerate ones that become strictly active along d.
    pub rows: Vec<usize>,
}

/// Directional derivative at a possibly degenerate point.
///
/// Strictly active rows stay pinned. Each degenerate row (active, zero
/// multiplier) either leaves the active set or becomes strictly active along
/// d; a single short probe solve at x + h d settles which, and the pinned
/// system is then differentiated along d.
pub fn directional_derivative(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    cls: &ActiveSetClassification,
    d: &DVec,
    opts: &DirectionalOpts,
) -> Result<DirectionalDerivative, SensitivityError> {
    let mut rows = cls.j_plus.clone();
    if !cls.j_zero.is_empty() {
        let h = opts.probe_scale * (1.0 + x.norm());
        let x_probe = x + h * d;
        let probe = solve_lower(prob, &x_probe, Some(sol), &opts.lower)
            .or_else(|e| match e {
                LowerError::MaxIterations(partial) => Ok(*partial),
                other => Err(SensitivityError::ProbeFailed(other.to_string())),
            })?;
        let probe_cls = classify_active_sets(prob, &x_probe, &probe, opts.lower.tol_active);
        for &j in &cls.j_zero {
            if probe_cls.j_plus.contains(&j) {
                rows.push(j);
            }
        }
        rows.sort_unstable();
    }
    let sens = sensitivity_for_rows(prob, x, sol, &rows, SaddleMethod::auto(prob.d_y()))?;
    let dy_star = &sens.grad_y_star * d;
    let dlambda = &sens.grad_lambda * d;
    let dnu = &sens.grad_nu * d;
    let dphi = prob.grad_x_f(x, &sol.y_star).dot(d) + prob.grad_y_f(x, &sol.y_star).dot(&dy_star);
    Ok(DirectionalDerivative { dy_star, dlambda, dnu, dphi, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Example1;

    fn solved(x: f64) -> (DVec, LowerSolution, ActiveSetClassification) {
        let xv = DVec::from_element(1, x);
        let opts = SolverOpts::default();
        let sol = solve_lower(&Example1, &xv, None, &opts).unwrap();
        let cls = classify_active_sets(&Example1, &xv, &sol, opts.tol_active);
        (xv, sol, cls)
    }

    #[test]
    fn gradient_on_the_active_branch() {
        // On (-1, 0): y* = -x, lambda = -2x(1+x), so dy*/dx = -1 and
        // dlambda/dx = -2 - 4x.
        for &x in &[-0.5, -0.1, -0.9] {
            let (xv, sol, cls) = solved(x);
            let sens = kkt_gradient(&Example1, &xv, &sol, &cls).unwrap();
            assert!((sens.grad_y_star[(0, 0)] + 1.0).abs() < 1e-8, "x = {x}");
            assert!(
                (sens.grad_lambda[(0, 0)] - (-2.0 - 4.0 * x)).abs() < 1e-7,
                "x = {x}: dlambda = {}",
                sens.grad_lambda[(0, 0)]
            );
            let g = phi_gradient(&Example1, &xv, &sol, &sens);
            assert!((g[0] + 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_on_the_inactive_branch() {
        for &x in &[-2.0, -1.5, 0.3, 1.0, 2.0] {
            let (xv, sol, cls) = solved(x);
            let sens = kkt_gradient(&Example1, &xv, &sol, &cls).unwrap();
            assert!((sens.grad_y_star[(0, 0)] - 2.0 * x).abs() < 1e-7, "x = {x}");
            assert_eq!(sens.grad_lambda[(0, 0)], 0.0);
            let g = phi_gradient(&Example1, &xv, &sol, &sens);
            assert!((g[0] - 2.0 * x).abs() < 1e-7, "x = {x}: grad = {}", g[0]);
        }
    }

    #[test]
    fn degenerate_point_rejected_with_indices() {
        let (xv, sol, cls) = solved(-1.0);
        match kkt_gradient(&Example1, &xv, &sol, &cls) {
            Err(SensitivityError::ScscViolated { j_zero }) => assert_eq!(j_zero, vec![0]),
            other => panic!("expected ScscViolated, got {other:?}"),
        }
    }

    #[test]
    fn representative_gradients_span_both_branches() {
        // Pinning the (inactive) constraint row reproduces the active-branch
        // gradient -1; the empty set gives the smooth branch 2x.
        let (xv, sol, _) = solved(-2.0);
        let g_empty = representative_gradient(&Example1, &xv, &sol, &[], SaddleMethod::Dense).unwrap();
        let g_pinned = representative_gradient(&Example1, &xv, &sol, &[0], SaddleMethod::Dense).unwrap();
        assert!((g_empty[0] + 4.0).abs() < 1e-7);
        assert!((g_pinned[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_sided_derivatives_at_the_kink() {
        // At x = -1 the constraint is active with zero multiplier. Moving
        // right it binds (y* = -x); moving left it releases (y* = x^2).
        let (xv, sol, cls) = solved(-1.0);
        let opts = DirectionalOpts::default();
        let right = directional_derivative(&Example1, &xv, &sol, &cls, &DVec::from_element(1, 1.0), &opts).unwrap();
        assert_eq!(right.rows, vec![0]);
        assert!((right.dphi + 1.0).abs() < 1e-6, "dphi right = {}", right.dphi);
        let left = directional_derivative(&Example1, &xv, &sol, &cls, &DVec::from_element(1, -1.0), &opts).unwrap();
        assert!(left.rows.is_empty());
        assert!((left.dphi - 2.0).abs() < 1e-6, "dphi left = {}", left.dphi);
    }

    #[test]
    fn directional_matches_gradient_where_smooth() {
        let (xv, sol, cls) = solved(0.7);
        let d = DVec::from_element(1, 1.0);
        let dd = directional_derivative(&Example1, &xv, &sol, &cls, &d, &DirectionalOpts::default()).unwrap();
        assert!((dd.dphi - 1.4).abs() < 1e-7);
        assert!((dd.dy_star[0] - 1.4).abs() < 1e-7);
    }

    #[test]
    fn cg_and_dense_backends_agree() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        for &(d_y, rows) in &[(6usize, 2usize), (12, 4), (30, 6)] {
            let a = DMat::from_fn(d_y, d_y, |_, _| rng.gen_range(-1.0..1.0));
            let h = &a * a.transpose() + DMat::identity(d_y, d_y);
            let r_y = DMat::from_fn(rows, d_y, |_, _| rng.gen_range(-1.0..1.0));
            let rhs_top = DMat::from_fn(d_y, 3, |_, _| rng.gen_range(-1.0..1.0));
            let r_x = DMat::from_fn(rows, 3, |_, _| rng.gen_range(-1.0..1.0));
            let (zd_top, zd_mult) = solve_saddle_block(&h, &r_y, &rhs_top, &r_x, SaddleMethod::Dense).unwrap();
            let (zc_top, zc_mult) = solve_saddle_block(&h, &r_y, &rhs_top, &r_x, SaddleMethod::Cg { tol: CG_TOL }).unwrap();
            assert!((&zd_top - &zc_top).amax() < 1e-8, "top mismatch d_y = {d_y}");
            assert!((&zd_mult - &zc_mult).amax() < 1e-8, "mult mismatch d_y = {d_y}");
        }
    }

    #[test]
    fn dependent_pinned_rows_fail_as_schur_singular() {
        let h = DMat::identity(4, 4);
        let mut r_y = DMat::zeros(2, 4);
        r_y.row_mut(0).copy_from(&DMat::from_row_slice(1, 4, &[1.0, 2.0, 0.0, 0.0]).row(0));
        r_y.row_mut(1).copy_from(&DMat::from_row_slice(1, 4, &[2.0, 4.0, 0.0, 0.0]).row(0));
        let rhs_top = DMat::zeros(4, 1);
        let r_x = DMat::from_row_slice(2, 1, &[1.0, 0.0]);
        match solve_saddle_block(&h, &r_y, &rhs_top, &r_x, SaddleMethod::Cg { tol: CG_TOL }) {
            Err(SensitivityError::SingularSchur) => {}
            other => panic!("expected SingularSchur, got {other:?}"),
        }
        match solve_saddle_block(&h, &r_y, &rhs_top, &r_x, SaddleMethod::Dense) {
            Err(SensitivityError::SingularKktMatrix) => {}
            other => panic!("expected SingularKktMatrix, got {other:?}"),
        }
    }
}
