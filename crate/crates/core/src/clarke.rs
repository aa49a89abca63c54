//! Subdifferential approximation on a ball.
//!
//! Phi is differentiable wherever strict complementarity holds, but its
//! gradient jumps where the active set changes. The descent step therefore
//! asks a coarser question: is Phi differentiable on the whole ball of radius
//! eps around x0? Constraint-wise Lipschitz estimates turn that into interval
//! arithmetic on the multiplier and slack values:
//!
//! * lambda_j > l_lambda_j * eps  keeps j strictly active on the ball,
//! * p_j < -l_p_j * eps           keeps j inactive on the ball,
//! * everything else (the index set `i_eps`) may switch within the ball.
//!
//! When `i_eps` is nonempty, each subset S of it that could be the active
//! complement yields one representative gradient, and the collection spans
//! the possible Clarke subdifferential over the ball. The descent direction
//! is the minimum-norm element of their convex hull.

use rand::Rng;
use thiserror::Error;

use crate::lower::{classify_active_sets, solve_lower, ActiveSetClassification, LowerSolution, SolverOpts};
use crate::problem::{BilevelProblem, DVec};
use crate::sensitivity::{representative_gradient, KktSensitivity, SaddleMethod, SensitivityError};

#[derive(Debug, Error)]
pub enum ClarkeError {
    #[error("all {attempted} candidate subsets produced singular systems")]
    AllSubsetsSingular { attempted: usize },
    #[error("no strictly complementary point found after {attempts} perturbations")]
    SamplingExhausted { attempts: usize },
    #[error("minimum-norm query over an empty gradient set")]
    EmptyGradientSet,
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

/// Per-constraint rate bounds with safety margin delta:
/// `l_lambda[j]` bounds |d lambda_j / dx|, `l_p[j]` bounds the total
/// derivative |d p_j(x, y*(x)) / dx| along the solution path.
#[derive(Debug, Clone)]
pub struct LipschitzEstimates {
    pub l_lambda: DVec,
    pub l_p: DVec,
    pub delta: f64,
}

pub fn estimate_lipschitz(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    sens: &KktSensitivity,
    delta: f64,
) -> LipschitzEstimates {
    let m = prob.m();
    let jac_x_p = prob.jac_x_p(x, &sol.y_star);
    let jac_y_p = prob.jac_y_p(x, &sol.y_star);
    let total_p = &jac_x_p + &jac_y_p * &sens.grad_y_star;
    let l_lambda = DVec::from_fn(m, |j, _| sens.grad_lambda.row(j).norm() + delta);
    let l_p = DVec::from_fn(m, |j, _| total_p.row(j).norm() + delta);
    LipschitzEstimates { l_lambda, l_p, delta }
}

/// Constraint partition over the ball of radius eps (see module docs).
#[derive(Debug, Clone)]
pub struct BallClassification {
    pub i_plus: Vec<usize>,
    pub i_minus: Vec<usize>,
    pub i_eps: Vec<usize>,
    pub eps: f64,
    pub estimates: LipschitzEstimates,
}

impl BallClassification {
    /// Phi is differentiable on the whole ball iff no constraint can switch.
    pub fn differentiable(&self) -> bool {
        self.i_eps.is_empty()
    }
}

/// Classifies every inequality over the eps-ball around x. The caller
/// supplies the sensitivity at x (strict complementarity must hold at the
/// center; see [`resolve_scsc_point`] for degenerate centers).
pub fn check_differentiability_on_ball(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    cls: &ActiveSetClassification,
    sens: &KktSensitivity,
    eps: f64,
    delta: f64,
) -> BallClassification {
    let estimates = estimate_lipschitz(prob, x, sol, sens, delta);
    let p = prob.p(x, &sol.y_star);
    let mut out = BallClassification {
        i_plus: Vec::new(),
        i_minus: Vec::new(),
        i_eps: Vec::new(),
        eps,
        estimates,
    };
    for j in 0..prob.m() {
        if cls.j.contains(&j) && sol.lambda[j] > out.estimates.l_lambda[j] * eps {
            out.i_plus.push(j);
        } else if !cls.j.contains(&j) && p[j] < -out.estimates.l_p[j] * eps {
            out.i_minus.push(j);
        } else {
            out.i_eps.push(j);
        }
    }
    out
}

/// Representative gradients over the ball: one per enumerated subset of
/// `i_eps`, each pinning `i_plus`, the equality rows, and the subset.
#[derive(Debug, Clone)]
pub struct SubgradientSet {
    pub gradients: Vec<DVec>,
    /// Pinned inequality rows behind each gradient (parallel to `gradients`).
    pub rows: Vec<Vec<usize>>,
    /// Subsets dropped because their pinned system was singular.
    pub skipped_subsets: usize,
    /// True when 2^|i_eps| exceeded the budget and the switch candidates were
    /// truncated to the most degenerate ones.
    pub truncated: bool,
}

/// Enumerates subsets of the switchable set, budgeted by `max_subsets`.
///
/// When the full enumeration does not fit, switch candidates are ranked by
/// degeneracy (ascending |lambda_j| + |p_j|): constraints closest to the
/// active/inactive boundary are the ones whose switching actually shapes the
/// subdifferential, so they keep their slots.
pub fn build_subgradient_set(
    prob: &dyn BilevelProblem,
    x: &DVec,
    sol: &LowerSolution,
    ball: &BallClassification,
    max_subsets: usize,
) -> Result<SubgradientSet, ClarkeError> {
    let method = SaddleMethod::auto(prob.d_y());
    let p = prob.p(x, &sol.y_star);

    let mut free = ball.i_eps.clone();
    let budget_bits = max_subsets.max(1).ilog2() as usize;
    let truncated = free.len() > budget_bits;
    if truncated {
        free.sort_by(|&a, &b| {
            let da = sol.lambda[a].abs() + p[a].abs();
            let db = sol.lambda[b].abs() + p[b].abs();
            da.partial_cmp(&db).unwrap()
        });
        free.truncate(budget_bits);
        free.sort_unstable();
    }

    let count = 1usize << free.len();
    let mut set = SubgradientSet {
        gradients: Vec::with_capacity(count),
        rows: Vec::with_capacity(count),
        skipped_subsets: 0,
        truncated,
    };
    for mask in 0..count {
        let mut rows = ball.i_plus.clone();
        for (bit, &j) in free.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                rows.push(j);
            }
        }
        rows.sort_unstable();
        match representative_gradient(prob, x, sol, &rows, method) {
            Ok(g) => {
                let duplicate = set.gradients.iter().any(|h| (h - &g).amax() <= 1e-13 * (1.0 + g.amax()));
                if !duplicate {
                    set.gradients.push(g);
                    set.rows.push(rows);
                }
            }
            Err(SensitivityError::SingularKktMatrix) | Err(SensitivityError::SingularSchur) => {
                set.skipped_subsets += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if set.gradients.is_empty() {
        return Err(ClarkeError::AllSubsetsSingular { attempted: count });
    }
    Ok(set)
}

/// Minimum-norm point of a convex hull.
#[derive(Debug, Clone)]
pub struct MinNormResult {
    pub point: DVec,
    /// Convex coefficients, aligned with the input points.
    pub coefficients: Vec<f64>,
    /// Optimality slack: ||u||^2 - min_v <v, u>, nonpositive up to `tol` at
    /// the true minimum-norm point.
    pub certificate: f64,
    pub iterations: usize,
}

/// Wolfe's minimum-norm-point algorithm over conv{points}.
///
/// Maintains a corral of affinely independent points; each major iteration
/// adds the most violating vertex and re-minimizes over the corral's convex
/// hull via the bordered Gram system. Falls back to projected gradient on the
/// simplex if the Gram factorization degenerates.
pub fn min_norm_element(points: &[DVec], tol: f64) -> Result<MinNormResult, ClarkeError> {
    if points.is_empty() {
        return Err(ClarkeError::EmptyGradientSet);
    }
    let np = points.len();
    if np == 1 {
        return Ok(MinNormResult {
            point: points[0].clone(),
            coefficients: vec![1.0],
            certificate: 0.0,
            iterations: 0,
        });
    }

    // Start from the shortest input point.
    let start = (0..np)
        .min_by(|&a, &b| points[a].norm_squared().partial_cmp(&points[b].norm_squared()).unwrap())
        .unwrap();
    let mut corral: Vec<usize> = vec![start];
    let mut weights: Vec<f64> = vec![1.0];
    let mut iterations = 0;

    let max_major = 16 * np + 64;
    for _ in 0..max_major {
        iterations += 1;
        let u = combine(points, &corral, &weights);
        let uu = u.norm_squared();

        // Most violating vertex.
        let (v_idx, v_dot) = (0..np)
            .map(|i| (i, points[i].dot(&u)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if v_dot >= uu - tol || corral.contains(&v_idx) {
            return Ok(finish(points, &corral, &weights, uu - v_dot, iterations));
        }
        corral.push(v_idx);
        weights.push(0.0);

        // Minor loop: pull the affine minimizer back into the simplex.
        loop {
            let a = match affine_minimizer(points, &corral) {
                Some(a) => a,
                None => {
                    let (coeffs, point) = simplex_pgd(points, tol);
                    let cert = certificate_of(points, &point);
                    return Ok(MinNormResult { point, coefficients: coeffs, certificate: cert, iterations });
                }
            };
            if a.iter().all(|&ai| ai > 1e-12) {
                weights = a;
                break;
            }
            // Step from weights toward a until a coordinate hits zero.
            let mut t = 1.0_f64;
            for i in 0..corral.len() {
                if a[i] < 1e-12 {
                    let denom = weights[i] - a[i];
                    if denom > 0.0 {
                        t = t.min(weights[i] / denom);
                    }
                }
            }
            for i in 0..corral.len() {
                weights[i] += t * (a[i] - weights[i]);
            }
            let keep: Vec<bool> = weights.iter().map(|&w| w > 1e-12).collect();
            let mut kc = Vec::new();
            let mut kw = Vec::new();
            for i in 0..corral.len() {
                if keep[i] {
                    kc.push(corral[i]);
                    kw.push(weights[i]);
                }
            }
            let total: f64 = kw.iter().sum();
            corral = kc;
            weights = kw.iter().map(|w| w / total).collect();
            if corral.len() == 1 {
                break;
            }
        }
    }
    let u = combine(points, &corral, &weights);
    let cert = certificate_of(points, &u);
    Ok(finish(points, &corral, &weights, cert, iterations))
}

fn combine(points: &[DVec], corral: &[usize], weights: &[f64]) -> DVec {
    let mut u = DVec::zeros(points[0].len());
    for (i, &idx) in corral.iter().enumerate() {
        u += weights[i] * &points[idx];
    }
    u
}

fn certificate_of(points: &[DVec], u: &DVec) -> f64 {
    let uu = u.norm_squared();
    let min_dot = points.iter().map(|p| p.dot(u)).fold(f64::INFINITY, f64::min);
    uu - min_dot
}

fn finish(points: &[DVec], corral: &[usize], weights: &[f64], certificate: f64, iterations: usize) -> MinNormResult {
    let mut coefficients = vec![0.0; points.len()];
    for (i, &idx) in corral.iter().enumerate() {
        coefficients[idx] += weights[i];
    }
    MinNormResult { point: combine(points, corral, weights), coefficients, certificate, iterations }
}

/// Minimizer of ||sum a_i p_i|| over the affine hull (sum a_i = 1) of the
/// corral, via the bordered Gram system. None when the system is singular.
fn affine_minimizer(points: &[DVec], corral: &[usize]) -> Option<Vec<f64>> {
    let k = corral.len();
    let mut sys = crate::problem::DMat::zeros(k + 1, k + 1);
    for i in 0..k {
        sys[(0, i + 1)] = 1.0;
        sys[(i + 1, 0)] = 1.0;
        for j in 0..k {
            sys[(i + 1, j + 1)] = points[corral[i]].dot(&points[corral[j]]);
        }
    }
    let mut rhs = DVec::zeros(k + 1);
    rhs[0] = 1.0;
    let sol = sys.full_piv_lu().solve(&rhs)?;
    let a: Vec<f64> = (0..k).map(|i| sol[i + 1]).collect();
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(a)
}

/// Deterministic projected-gradient fallback on the simplex.
fn simplex_pgd(points: &[DVec], tol: f64) -> (Vec<f64>, DVec) {
    let np = points.len();
    let gram = crate::problem::DMat::from_fn(np, np, |i, j| points[i].dot(&points[j]));
    let lip = gram.diagonal().sum().max(1e-12);
    let mut w = vec![1.0 / np as f64; np];
    let mut best = w.clone();
    let mut best_val = f64::INFINITY;
    for _ in 0..20_000 {
        let wv = DVec::from_vec(w.clone());
        let grad = &gram * &wv;
        let val = wv.dot(&grad);
        if val < best_val - 1e-18 {
            best_val = val;
            best = w.clone();
        }
        let stepped: Vec<f64> = (0..np).map(|i| w[i] - grad[i] / lip).collect();
        w = project_simplex(&stepped);
        let u = combine(points, &(0..np).collect::<Vec<_>>(), &w);
        if certificate_of(points, &u) <= tol {
            best = w.clone();
            break;
        }
    }
    let point = combine(points, &(0..np).collect::<Vec<_>>(), &best);
    (best, point)
}

fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut rho = 0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        if ui - (css - 1.0) / (i + 1) as f64 > 0.0 {
            rho = i + 1;
        }
    }
    let theta = (u[..rho].iter().sum::<f64>() - 1.0) / rho as f64;
    v.iter().map(|&vi| (vi - theta).max(0.0)).collect()
}

/// Finds a strictly complementary center for the ball test.
///
/// First tries x0 itself; if degenerate constraints are present, retries with
/// tiny uniform perturbations (at most `max_attempts`, scaled well below any
/// meaningful ball radius so the returned center stays equivalent to x0 for
/// the caller). The scale doubles per attempt: the first retries stay small
/// enough not to move any gradient by more than ~1e-6, while later ones
/// clear the active-set tolerance band, inside which the classification
/// cannot distinguish the two sides of a kink.
pub fn resolve_scsc_point<R: Rng>(
    prob: &dyn BilevelProblem,
    x0: &DVec,
    warm: Option<&LowerSolution>,
    opts: &SolverOpts,
    rng: &mut R,
    max_attempts: usize,
) -> Result<(DVec, LowerSolution, ActiveSetClassification), ClarkeError> {
    let base = 1e-7 * (1.0 + x0.norm());
    for attempt in 0..max_attempts {
        let scale = base * (1 << attempt.min(48)) as f64;
        let x = if attempt == 0 {
            x0.clone()
        } else {
            x0.map(|v| v + rng.gen_range(-scale..scale))
        };
        let sol = match solve_lower(prob, &x, warm, opts) {
            Ok(s) => s,
            Err(_) if attempt + 1 < max_attempts => continue,
            Err(e) => return Err(ClarkeError::Sensitivity(SensitivityError::ProbeFailed(e.to_string()))),
        };
        let cls = classify_active_sets(prob, &x, &sol, opts.tol_active);
        if cls.j_zero.is_empty() {
            return Ok((x, sol, cls));
        }
    }
    Err(ClarkeError::SamplingExhausted { attempts: max_attempts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Example1;
    use crate::sensitivity::kkt_gradient;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    const DELTA: f64 = 1e-3;

    fn solved(x: f64) -> (DVec, LowerSolution, ActiveSetClassification, KktSensitivity) {
        let xv = DVec::from_element(1, x);
        let opts = SolverOpts::default();
        let sol = solve_lower(&Example1, &xv, None, &opts).unwrap();
        let cls = classify_active_sets(&Example1, &xv, &sol, opts.tol_active);
        let sens = kkt_gradient(&Example1, &xv, &sol, &cls).unwrap();
        (xv, sol, cls, sens)
    }

    #[test]
    fn lipschitz_estimates_match_hand_values() {
        // Active branch at x = -0.5: dlambda/dx = -2 - 4x = 0 and the
        // constraint value is pinned at zero, so both rates reduce to delta.
        let (xv, sol, _, sens) = solved(-0.5);
        let est = estimate_lipschitz(&Example1, &xv, &sol, &sens, DELTA);
        assert!((est.l_lambda[0] - DELTA).abs() < 1e-9);
        assert!((est.l_p[0] - DELTA).abs() < 1e-7);

        // Smooth branch at x = 1: dp/dx = -1 - 2x = -3.
        let (xv, sol, _, sens) = solved(1.0);
        let est = estimate_lipschitz(&Example1, &xv, &sol, &sens, DELTA);
        assert!((est.l_p[0] - (3.0 + DELTA)).abs() < 1e-7, "l_p = {}", est.l_p[0]);
    }

    #[test]
    fn ball_spanning_a_kink_is_flagged() {
        // x = -0.98 sits 0.02 from the kink at -1; a ball of radius 0.1
        // reaches it, so the constraint is switchable.
        let (xv, sol, cls, sens) = solved(-0.98);
        let ball = check_differentiability_on_ball(&Example1, &xv, &sol, &cls, &sens, 0.1, DELTA);
        assert!(!ball.differentiable());
        assert_eq!(ball.i_eps, vec![0]);

        // A much smaller ball stays on one branch.
        let ball = check_differentiability_on_ball(&Example1, &xv, &sol, &cls, &sens, 0.005, DELTA);
        assert!(ball.differentiable());
        assert_eq!(ball.i_plus, vec![0]);
    }

    #[test]
    fn subgradients_near_the_kink_span_both_branches() {
        let (xv, sol, cls, sens) = solved(-0.98);
        let ball = check_differentiability_on_ball(&Example1, &xv, &sol, &cls, &sens, 0.1, DELTA);
        let set = build_subgradient_set(&Example1, &xv, &sol, &ball, 64).unwrap();
        assert_eq!(set.gradients.len(), 2);
        assert_eq!(set.skipped_subsets, 0);
        assert!(!set.truncated);
        let mut vals: Vec<f64> = set.gradients.iter().map(|g| g[0]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] + 1.96).abs() < 1e-7, "smooth-branch gradient 2x");
        assert!((vals[1] + 1.0).abs() < 1e-9, "active-branch gradient -1");
    }

    #[test]
    fn min_norm_basics() {
        let pts = vec![DVec::from_vec(vec![2.0, 0.0]), DVec::from_vec(vec![0.0, 2.0])];
        let r = min_norm_element(&pts, 1e-12).unwrap();
        assert!((r.point[0] - 1.0).abs() < 1e-10);
        assert!((r.point[1] - 1.0).abs() < 1e-10);
        assert!((r.coefficients[0] - 0.5).abs() < 1e-10);

        // Hull straddling the origin.
        let pts = vec![DVec::from_element(1, -1.0), DVec::from_element(1, 2.0)];
        let r = min_norm_element(&pts, 1e-12).unwrap();
        assert!(r.point[0].abs() < 1e-10);

        // Optimum at a vertex.
        let pts = vec![DVec::from_vec(vec![1.0, 1.0]), DVec::from_vec(vec![2.0, 2.0])];
        let r = min_norm_element(&pts, 1e-12).unwrap();
        assert!((r.point[0] - 1.0).abs() < 1e-10);
        assert!((r.coefficients[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn min_norm_certificate_on_random_hulls() {
        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..30 {
            let dim = 1 + trial % 4;
            let count = 2 + trial % 6;
            let pts: Vec<DVec> = (0..count)
                .map(|_| DVec::from_fn(dim, |_, _| rand::Rng::gen_range(&mut rng, -2.0..2.0)))
                .collect();
            let r = min_norm_element(&pts, 1e-10).unwrap();
            assert!(r.certificate <= 1e-9, "trial {trial}: certificate {}", r.certificate);
            let sum: f64 = r.coefficients.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            assert!(r.coefficients.iter().all(|&c| c >= -1e-12));
            let rebuilt = pts
                .iter()
                .zip(&r.coefficients)
                .fold(DVec::zeros(dim), |acc, (p, &c)| acc + c * p);
            assert!((rebuilt - &r.point).amax() < 1e-9);
        }
    }

    #[test]
    fn truncation_keeps_the_most_degenerate_candidates() {
        // Synthetic ball state with more switch candidates than the budget
        // admits: indices with the smallest |lambda| + |p| must survive.
        struct ManyBox;
        impl BilevelProblem for ManyBox {
            fn d_x(&self) -> usize {
                1
            }
            fn d_y(&self) -> usize {
                1
            }
            fn m(&self) -> usize {
                4
            }
            fn mu(&self) -> f64 {
                2.0
            }
            fn is_qp(&self) -> bool {
                true
            }
            fn f(&self, _x: &DVec, y: &DVec) -> f64 {
                y[0]
            }
            fn grad_x_f(&self, _x: &DVec, _y: &DVec) -> DVec {
                DVec::zeros(1)
            }
            fn grad_y_f(&self, _x: &DVec, _y: &DVec) -> DVec {
                DVec::from_element(1, 1.0)
            }
            fn g(&self, x: &DVec, y: &DVec) -> f64 {
                (y[0] - x[0]).powi(2)
            }
            fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
                DVec::from_element(1, 2.0 * (y[0] - x[0]))
            }
            fn hess_yy_g(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::from_element(1, 1, 2.0)
            }
            fn hess_xy_g(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::from_element(1, 1, -2.0)
            }
            fn p(&self, _x: &DVec, y: &DVec) -> DVec {
                // Staggered slacks: constraint j is y <= j/10 + 1.
                DVec::from_fn(4, |j, _| y[0] - (j as f64 / 10.0 + 1.0))
            }
            fn jac_y_p(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::from_element(4, 1, 1.0)
            }
            fn jac_x_p(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::zeros(4, 1)
            }
        }
        let xv = DVec::from_element(1, 0.9);
        let opts = SolverOpts::default();
        let sol = solve_lower(&ManyBox, &xv, None, &opts).unwrap();
        let cls = classify_active_sets(&ManyBox, &xv, &sol, opts.tol_active);
        let sens = kkt_gradient(&ManyBox, &xv, &sol, &cls).unwrap();
        // Huge radius: every constraint becomes switchable.
        let ball = check_differentiability_on_ball(&ManyBox, &xv, &sol, &cls, &sens, 10.0, DELTA);
        assert_eq!(ball.i_eps.len(), 4);
        let set = build_subgradient_set(&ManyBox, &xv, &sol, &ball, 4).unwrap();
        assert!(set.truncated);
        // Budget of 4 subsets = 2 candidate rows; singletons {0} and {1} are
        // the most degenerate (smallest slack), so pinned rows never mention
        // constraint 2 or 3.
        assert!(set.rows.iter().all(|rows| rows.iter().all(|&j| j < 2)));
        assert!(set.rows.iter().any(|rows| rows == &vec![0]));
    }

    #[test]
    fn duplicated_pinned_rows_are_skipped_not_fatal() {
        struct Twin;
        impl BilevelProblem for Twin {
            fn d_x(&self) -> usize {
                1
            }
            fn d_y(&self) -> usize {
                1
            }
            fn m(&self) -> usize {
                2
            }
            fn mu(&self) -> f64 {
                2.0
            }
            fn is_qp(&self) -> bool {
                true
            }
            fn f(&self, _x: &DVec, y: &DVec) -> f64 {
                y[0]
            }
            fn grad_x_f(&self, _x: &DVec, _y: &DVec) -> DVec {
                DVec::zeros(1)
            }
            fn grad_y_f(&self, _x: &DVec, _y: &DVec) -> DVec {
                DVec::from_element(1, 1.0)
            }
            fn g(&self, x: &DVec, y: &DVec) -> f64 {
                (y[0] - x[0]).powi(2)
            }
            fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
                DVec::from_element(1, 2.0 * (y[0] - x[0]))
            }
            fn hess_yy_g(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::from_element(1, 1, 2.0)
            }
            fn hess_xy_g(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::from_element(1, 1, -2.0)
            }
            fn p(&self, _x: &DVec, y: &DVec) -> DVec {
                // Identical pair, inactive at the solution below.
                DVec::from_element(2, y[0] - 1.0)
            }
            fn jac_y_p(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::from_element(2, 1, 1.0)
            }
            fn jac_x_p(&self, _x: &DVec, _y: &DVec) -> crate::problem::DMat {
                crate::problem::DMat::zeros(2, 1)
            }
        }
        let xv = DVec::from_element(1, 0.95);
        let opts = SolverOpts::default();
        let sol = solve_lower(&Twin, &xv, None, &opts).unwrap();
        let cls = classify_active_sets(&Twin, &xv, &sol, opts.tol_active);
        let sens = kkt_gradient(&Twin, &xv, &sol, &cls).unwrap();
        let ball = check_differentiability_on_ball(&Twin, &xv, &sol, &cls, &sens, 1.0, DELTA);
        assert_eq!(ball.i_eps.len(), 2);
        let set = build_subgradient_set(&Twin, &xv, &sol, &ball, 64).unwrap();
        // The pair {0,1} is rank deficient and must be counted, not fatal.
        assert_eq!(set.skipped_subsets, 1);
        assert!(!set.gradients.is_empty());
    }

    #[test]
    fn degenerate_center_is_perturbed_away() {
        let mut rng = StdRng::seed_from_u64(3);
        let x0 = DVec::from_element(1, -1.0);
        let (x, _, cls) = resolve_scsc_point(&Example1, &x0, None, &SolverOpts::default(), &mut rng, 5).unwrap();
        assert!(cls.j_zero.is_empty());
        assert!((x[0] + 1.0).abs() < 1e-6, "perturbation stayed tiny");
    }

    #[test]
    fn representative_set_at_the_degenerate_kink_itself() {
        // Centered exactly on the kink: after the strict-complementarity
        // rescue the set members still land on {-2, -1} to 1e-6, because the
        // perturbation is orders of magnitude below that tolerance.
        let mut rng = StdRng::seed_from_u64(4);
        let x0 = DVec::from_element(1, -1.0);
        let opts = SolverOpts::default();
        let (x, sol, cls) = resolve_scsc_point(&Example1, &x0, None, &opts, &mut rng, 5).unwrap();
        let sens = kkt_gradient(&Example1, &x, &sol, &cls).unwrap();
        let ball = check_differentiability_on_ball(&Example1, &x, &sol, &cls, &sens, 0.1, 1e-3);
        assert!(!ball.differentiable());
        let set = build_subgradient_set(&Example1, &x, &sol, &ball, 64).unwrap();
        let mut got: Vec<f64> = set.gradients.iter().map(|g| g[0]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got.len(), 2, "two branch gradients, got {got:?}");
        assert!((got[0] + 2.0).abs() < 1e-6, "inactive branch: {}", got[0]);
        assert!((got[1] + 1.0).abs() < 1e-6, "active branch: {}", got[1]);
    }
}
