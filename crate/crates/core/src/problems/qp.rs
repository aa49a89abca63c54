//! Parametric quadratic lower levels:
//!
//! ```text
//!     g(x, y) = 1/2 y'Q y + (C x + c0)' y        Q symmetric positive definite
//!     p(x, y) = G y - (H x + h0) <= 0
//!     q(x, y) = A y - (B x + b0)  = 0
//!     f(x, y) = 1/2 ||y - y_target||^2 + x_reg ||x||^2
//! ```
//!
//! Everything downstream exercises these: they are the only family where an
//! exhaustive active-set reference solver is affordable, which makes them the
//! workhorse of the derivative cross-checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::linalg::LdlFactor;
use crate::problem::{min_eigenvalue, BilevelProblem, DMat, DVec, ProblemError};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMat,
    pub c_mat: DMat,
    pub c0: DVec,
    pub g_ineq: DMat,
    pub h_mat: DMat,
    pub h0: DVec,
    pub a_eq: DMat,
    pub b_mat: DMat,
    pub b0: DVec,
    pub y_target: DVec,
    pub x_reg: f64,
    mu: f64,
}

impl QpProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        q: DMat,
        c_mat: DMat,
        c0: DVec,
        g_ineq: DMat,
        h_mat: DMat,
        h0: DVec,
        a_eq: DMat,
        b_mat: DMat,
        b0: DVec,
        y_target: DVec,
        x_reg: f64,
    ) -> Result<Self, ProblemError> {
        let d_y = q.nrows();
        let d_x = c_mat.ncols();
        let m = g_ineq.nrows();
        let n = a_eq.nrows();
        let want = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(ProblemError::Dimension(what.to_string()))
            }
        };
        want(q.ncols() == d_y, "q must be square")?;
        want(c_mat.nrows() == d_y && c0.len() == d_y, "c blocks must match d_y")?;
        want(g_ineq.ncols() == d_y || m == 0, "g_ineq columns must match d_y")?;
        want(h_mat.nrows() == m && h_mat.ncols() == d_x || m == 0 && h_mat.nrows() == 0, "h_mat shape")?;
        want(h0.len() == m, "h0 length")?;
        want(a_eq.ncols() == d_y || n == 0, "a_eq columns must match d_y")?;
        want(b_mat.nrows() == n && b_mat.ncols() == d_x || n == 0 && b_mat.nrows() == 0, "b_mat shape")?;
        want(b0.len() == n, "b0 length")?;
        want(y_target.len() == d_y, "y_target length")?;
        if (&q - q.transpose()).amax() > 1e-10 * (1.0 + q.amax()) {
            return Err(ProblemError::Invalid("q must be symmetric".into()));
        }
        let mu = min_eigenvalue(&q);
        if mu <= 0.0 {
            return Err(ProblemError::Invalid(format!("q must be positive definite (min eig {mu:.3e})")));
        }
        Ok(Self { q, c_mat, c0, g_ineq, h_mat, h0, a_eq, b_mat, b0, y_target, x_reg, mu })
    }

    /// Declarative instance from JSON. Matrices are row-major arrays of
    /// arrays; `g_ineq`/`h_mat`/`h0` and `a_eq`/`b_mat`/`b0` blocks are
    /// optional (omit for an unconstrained or equality-free instance).
    pub fn from_json(text: &str) -> Result<Self, ProblemError> {
        #[derive(Deserialize)]
        struct Raw {
            q: Vec<Vec<f64>>,
            c_mat: Vec<Vec<f64>>,
            c0: Vec<f64>,
            #[serde(default)]
            g_ineq: Vec<Vec<f64>>,
            #[serde(default)]
            h_mat: Vec<Vec<f64>>,
            #[serde(default)]
            h0: Vec<f64>,
            #[serde(default)]
            a_eq: Vec<Vec<f64>>,
            #[serde(default)]
            b_mat: Vec<Vec<f64>>,
            #[serde(default)]
            b0: Vec<f64>,
            y_target: Vec<f64>,
            #[serde(default = "default_x_reg")]
            x_reg: f64,
        }
        fn default_x_reg() -> f64 {
            0.05
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| ProblemError::Invalid(format!("config JSON: {e}")))?;
        let d_x = raw.c_mat.first().map(|r| r.len()).unwrap_or(0);
        let to_mat = |rows: &[Vec<f64>], cols: usize| -> Result<DMat, ProblemError> {
            if rows.is_empty() {
                return Ok(DMat::zeros(0, cols));
            }
            let c = rows[0].len();
            if rows.iter().any(|r| r.len() != c) {
                return Err(ProblemError::Invalid("ragged matrix in config".into()));
            }
            Ok(DMat::from_fn(rows.len(), c, |i, j| rows[i][j]))
        };
        QpProblem::new(
            to_mat(&raw.q, 0)?,
            to_mat(&raw.c_mat, d_x)?,
            DVec::from_vec(raw.c0),
            to_mat(&raw.g_ineq, 0)?,
            to_mat(&raw.h_mat, d_x)?,
            DVec::from_vec(raw.h0),
            to_mat(&raw.a_eq, 0)?,
            to_mat(&raw.b_mat, d_x)?,
            DVec::from_vec(raw.b0),
            DVec::from_vec(raw.y_target),
            raw.x_reg,
        )
    }

    /// One-dimensional instance whose single constraint is active with a
    /// zero multiplier at x = 0 (strict complementarity fails there):
    /// g = 1/2 y^2 + 0.8 x y, constraint y <= 0, f = 1/2 (y - 1)^2.
    /// For x > 0 the constraint is inactive with y* = -0.8x; for x < 0 it
    /// pins y* = 0 with lambda = -0.8x > 0.
    pub fn degenerate_at_origin() -> Self {
        QpProblem::new(
            DMat::from_element(1, 1, 1.0),
            DMat::from_element(1, 1, 0.8),
            DVec::zeros(1),
            DMat::from_element(1, 1, 1.0),
            DMat::zeros(1, 1),
            DVec::zeros(1),
            DMat::zeros(0, 1),
            DMat::zeros(0, 1),
            DVec::zeros(0),
            DVec::from_element(1, 1.0),
            0.0,
        )
        .expect("fixed instance is valid")
    }

    fn c_of(&self, x: &DVec) -> DVec {
        &self.c_mat * x + &self.c0
    }
}

impl BilevelProblem for QpProblem {
    fn d_x(&self) -> usize {
        self.c_mat.ncols()
    }
    fn d_y(&self) -> usize {
        self.q.nrows()
    }
    fn m(&self) -> usize {
        self.g_ineq.nrows()
    }
    fn n(&self) -> usize {
        self.a_eq.nrows()
    }
    fn mu(&self) -> f64 {
        self.mu
    }
    fn is_qp(&self) -> bool {
        true
    }

    fn f(&self, x: &DVec, y: &DVec) -> f64 {
        0.5 * (y - &self.y_target).norm_squared() + self.x_reg * x.norm_squared()
    }
    fn grad_x_f(&self, x: &DVec, _y: &DVec) -> DVec {
        2.0 * self.x_reg * x
    }
    fn grad_y_f(&self, _x: &DVec, y: &DVec) -> DVec {
        y - &self.y_target
    }

    fn g(&self, x: &DVec, y: &DVec) -> f64 {
        0.5 * (&self.q * y).dot(y) + self.c_of(x).dot(y)
    }
    fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
        &self.q * y + self.c_of(x)
    }
    fn hess_yy_g(&self, _x: &DVec, _y: &DVec) -> DMat {
        self.q.clone()
    }
    fn hess_xy_g(&self, _x: &DVec, _y: &DVec) -> DMat {
        self.c_mat.clone()
    }

    fn p(&self, x: &DVec, y: &DVec) -> DVec {
        &self.g_ineq * y - (&self.h_mat * x + &self.h0)
    }
    fn jac_y_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        self.g_ineq.clone()
    }
    fn jac_x_p(&self, _x: &DVec, _y: &DVec) -> DMat {
        -self.h_mat.clone()
    }

    fn q(&self, x: &DVec, y: &DVec) -> DVec {
        &self.a_eq * y - (&self.b_mat * x + &self.b0)
    }
    fn jac_y_q(&self, _x: &DVec, _y: &DVec) -> DMat {
        self.a_eq.clone()
    }
    fn jac_x_q(&self, _x: &DVec, _y: &DVec) -> DMat {
        -self.b_mat.clone()
    }
}

/// Exhaustive reference solver: tries every active subset of the
/// inequalities, solves the equality KKT system, and keeps the feasible
/// candidate with correct multiplier signs and lowest objective. Exponential
/// in m; only for test-scale instances.
#[derive(Debug, Clone)]
pub struct QpReference {
    prob: QpProblem,
}

impl QpReference {
    /// (y, lambda, nu), or None when no subset yields a valid KKT point
    /// (numerically degenerate instance).
    pub fn solve(&self, x: &DVec) -> Option<(DVec, DVec, DVec)> {
        let p = &self.prob;
        let d_y = p.d_y();
        let m = p.m();
        let n = p.n();
        let c = p.c_of(x);
        let rhs_p = &p.h_mat * x + &p.h0;
        let rhs_q = &p.b_mat * x + &p.b0;

        let mut best: Option<(f64, DVec, DVec, DVec)> = None;
        for mask in 0..(1usize << m) {
            let active: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
            let na = active.len();
            let dim = d_y + na + n;
            let mut kkt = DMat::zeros(dim, dim);
            kkt.view_mut((0, 0), (d_y, d_y)).copy_from(&p.q);
            for (r, &j) in active.iter().enumerate() {
                for col in 0..d_y {
                    kkt[(d_y + r, col)] = p.g_ineq[(j, col)];
                    kkt[(col, d_y + r)] = p.g_ineq[(j, col)];
                }
            }
            for r in 0..n {
                for col in 0..d_y {
                    kkt[(d_y + na + r, col)] = p.a_eq[(r, col)];
                    kkt[(col, d_y + na + r)] = p.a_eq[(r, col)];
                }
            }
            let mut rhs = DVec::zeros(dim);
            rhs.rows_mut(0, d_y).copy_from(&(-&c));
            for (r, &j) in active.iter().enumerate() {
                rhs[d_y + r] = rhs_p[j];
            }
            for r in 0..n {
                rhs[d_y + na + r] = rhs_q[r];
            }
            let Ok(factor) = LdlFactor::new(&kkt) else { continue };
            let z = factor.solve_vec(&rhs);
            let y = DVec::from_column_slice(&z.as_slice()[0..d_y]);
            let lam_a = DVec::from_column_slice(&z.as_slice()[d_y..d_y + na]);
            let nu = DVec::from_column_slice(&z.as_slice()[d_y + na..dim]);

            if lam_a.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let viol = (&p.g_ineq * &y - &rhs_p).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m > 0 && viol > 1e-9 {
                continue;
            }
            let obj = 0.5 * (&p.q * &y).dot(&y) + c.dot(&y);
            if best.as_ref().map_or(true, |(b, _, _, _)| obj < *b - 1e-12) {
                let mut lam = DVec::zeros(m);
                for (r, &j) in active.iter().enumerate() {
                    lam[j] = lam_a[r].max(0.0);
                }
                best = Some((obj, y, lam, nu));
            }
        }
        best.map(|(_, y, lam, nu)| (y, lam, nu))
    }
}

/// Seeded random instance plus its exhaustive reference solver.
///
/// The generator keeps (x, y) = (0, 0) strictly feasible with unit margin and
/// scales the x-couplings so the region stays nonempty for |x| well past 1.
pub fn make_bilevel_qp(seed: u64, d_x: usize, d_y: usize, m: usize, n: usize) -> (QpProblem, QpReference) {
    assert!(n < d_y || n == 0, "equalities must leave freedom in y");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);

    let r = DMat::from_fn(d_y, d_y, |_, _| u(-1.0, 1.0));
    let q = &r * r.transpose() + DMat::identity(d_y, d_y);
    let c_mat = DMat::from_fn(d_y, d_x, |_, _| u(-1.0, 1.0));
    let c0 = DVec::from_fn(d_y, |_, _| u(-0.5, 0.5));
    let g_ineq = DMat::from_fn(m, d_y, |_, _| u(-1.0, 1.0));
    let h_mat = DMat::from_fn(m, d_x, |_, _| 0.3 * u(-1.0, 1.0));
    let h0 = DVec::from_fn(m, |_, _| 1.0 + u(0.0, 0.5));
    let a_eq = DMat::from_fn(n, d_y, |_, _| u(-1.0, 1.0));
    let b_mat = DMat::from_fn(n, d_x, |_, _| 0.3 * u(-1.0, 1.0));
    let b0 = DVec::zeros(n);
    let y_target = DVec::from_fn(d_y, |_, _| u(-1.0, 1.0));

    let prob = QpProblem::new(q, c_mat, c0, g_ineq, h_mat, h0, a_eq, b_mat, b0, y_target, 0.05)
        .expect("generated instance is valid by construction");
    let reference = QpReference { prob: prob.clone() };
    (prob, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lower::{classify_active_sets, solve_lower, SolverOpts};
    use crate::problem::validate_problem;

    fn random_x(d_x: usize, seed: u64) -> DVec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVec::from_fn(d_x, |_, _| rng.gen_range(-0.8..0.8))
    }

    #[test]
    fn unconstrained_closed_form() {
        let (prob, _) = make_bilevel_qp(1, 2, 3, 0, 0);
        let x = random_x(2, 9);
        let sol = solve_lower(&prob, &x, None, &SolverOpts::default()).unwrap();
        let y_exact = -prob.q.clone().try_inverse().unwrap() * prob.c_of(&x);
        assert!((&sol.y_star - &y_exact).amax() < 1e-9);
    }

    #[test]
    fn interior_point_matches_exhaustive_reference() {
        let (prob, reference) = make_bilevel_qp(0, 2, 3, 2, 0);
        let opts = SolverOpts::default();
        for seed in 0..6 {
            let x = random_x(2, 100 + seed);
            let sol = solve_lower(&prob, &x, None, &opts).unwrap();
            let (y_ref, lam_ref, _) = reference.solve(&x).expect("reference found a KKT point");
            assert!((&sol.y_star - &y_ref).amax() < 1e-7, "seed {seed}");
            assert!((&sol.lambda - &lam_ref).amax() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn reference_agrees_on_equality_constrained_instances() {
        let (prob, reference) = make_bilevel_qp(4, 2, 4, 2, 1);
        let opts = SolverOpts::default();
        let x = random_x(2, 42);
        let sol = solve_lower(&prob, &x, None, &opts).unwrap();
        let (y_ref, _, nu_ref) = reference.solve(&x).unwrap();
        assert!((&sol.y_star - &y_ref).amax() < 1e-7);
        assert!((&sol.nu - &nu_ref).amax() < 1e-6);
    }

    #[test]
    fn generated_instances_validate() {
        for seed in [0, 3, 7] {
            let (prob, _) = make_bilevel_qp(seed, 2, 3, 2, 1);
            let pts: Vec<(DVec, DVec)> = (0..3)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 10 + i);
                    (
                        DVec::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                        DVec::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
                    )
                })
                .collect();
            let report = validate_problem(&prob, &pts);
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn degenerate_instance_loses_strict_complementarity_at_origin() {
        let prob = QpProblem::degenerate_at_origin();
        let opts = SolverOpts::default();
        let x = DVec::zeros(1);
        let sol = solve_lower(&prob, &x, None, &opts).unwrap();
        assert!(sol.y_star[0].abs() < 1e-9);
        assert_eq!(sol.lambda[0], 0.0);
        let cls = classify_active_sets(&prob, &x, &sol, opts.tol_active);
        assert_eq!(cls.j_zero, vec![0]);

        // Branch values on each side.
        let sol_r = solve_lower(&prob, &DVec::from_element(1, 0.5), None, &opts).unwrap();
        assert!((sol_r.y_star[0] + 0.4).abs() < 1e-8, "inactive branch y* = -0.8x");
        let sol_l = solve_lower(&prob, &DVec::from_element(1, -0.5), None, &opts).unwrap();
        assert!(sol_l.y_star[0].abs() < 1e-8, "pinned branch y* = 0");
        assert!((sol_l.lambda[0] - 0.4).abs() < 1e-7, "lambda = -0.8x");
    }

    #[test]
    fn json_declaration_builds_the_same_problem() {
        let text = r#"{
            "q": [[2.0, 0.0], [0.0, 2.0]],
            "c_mat": [[1.0], [0.0]],
            "c0": [0.0, -1.0],
            "g_ineq": [[1.0, 1.0]],
            "h_mat": [[0.5]],
            "h0": [1.0],
            "y_target": [0.0, 0.0],
            "x_reg": 0.1
        }"#;
        let prob = QpProblem::from_json(text).unwrap();
        assert_eq!(prob.d_x(), 1);
        assert_eq!(prob.d_y(), 2);
        assert_eq!(prob.m(), 1);
        assert_eq!(prob.n(), 0);
        let x = DVec::from_element(1, 0.3);
        let y = DVec::from_vec(vec![0.2, 0.4]);
        assert!((prob.g(&x, &y) - (0.5 * 2.0 * (0.04 + 0.16) + 0.3 * 0.2 - 0.4)).abs() < 1e-12);
        assert!((prob.p(&x, &y)[0] - (0.6 - 0.5 * 0.3 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn json_rejects_bad_instances() {
        assert!(QpProblem::from_json("{").is_err());
        let asym = r#"{"q": [[1.0, 0.5], [0.0, 1.0]], "c_mat": [[1.0],[1.0]], "c0": [0,0], "y_target": [0,0]}"#;
        assert!(QpProblem::from_json(asym).is_err());
        let indef = r#"{"q": [[1.0, 0.0], [0.0, -1.0]], "c_mat": [[1.0],[1.0]], "c0": [0,0], "y_target": [0,0]}"#;
        assert!(QpProblem::from_json(indef).is_err());
    }
}
