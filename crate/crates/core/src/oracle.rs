//! Independent verification machinery: finite differences of the implicit
//! objective, gradient sampling over a ball, and a simplex-grid brute force
//! for the min-norm subproblem. Everything here is deliberately slow and
//! simple; production code must never call it outside of `verify` runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clarke::check_differentiability_on_ball;
use crate::lower::{classify_active_sets, solve_lower, LowerError, SolverOpts};
use crate::problem::{BilevelProblem, DVec};
use crate::sensitivity::{kkt_gradient, phi_gradient, SensitivityError};

/// Lower solves inside the oracles run tighter than production so oracle
/// noise stays far below the finite-difference truncation error.
pub const ORACLE_LOWER_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle precondition violated: {0}")]
    Precondition(String),
    #[error("could not find {want} differentiable sample points in {attempts} attempts")]
    SamplingExhausted { want: usize, attempts: usize },
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

fn oracle_opts() -> SolverOpts {
    SolverOpts { tol_kkt: ORACLE_LOWER_TOL, ..SolverOpts::default() }
}

fn phi_at(prob: &dyn BilevelProblem, x: &DVec, opts: &SolverOpts) -> Result<f64, LowerError> {
    let sol = solve_lower(prob, x, None, opts)?;
    Ok(prob.f(x, &sol.y_star))
}

/// Central finite differences of Φ(x) = f(x, y*(x)), one full lower solve
/// per probe. Only meaningful where Φ is differentiable.
pub fn fd_phi_gradient(prob: &dyn BilevelProblem, x: &DVec, h: f64) -> Result<DVec, OracleError> {
    if !(h > 0.0) {
        return Err(OracleError::Precondition(format!("step h must be positive, got {h}")));
    }
    let opts = oracle_opts();
    let mut grad = DVec::zeros(prob.d_x());
    for i in 0..prob.d_x() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        grad[i] = (phi_at(prob, &xp, &opts)? - phi_at(prob, &xm, &opts)?) / (2.0 * h);
    }
    Ok(grad)
}

/// One-sided difference quotient of Φ along direction d, for checking
/// directional derivatives at possibly nonsmooth points.
pub fn fd_phi_directional(prob: &dyn BilevelProblem, x: &DVec, d: &DVec, h: f64) -> Result<f64, OracleError> {
    if !(h > 0.0) {
        return Err(OracleError::Precondition(format!("step h must be positive, got {h}")));
    }
    if d.norm() == 0.0 {
        return Err(OracleError::Precondition("direction must be nonzero".into()));
    }
    let opts = oracle_opts();
    let x_probe = x + d * h;
    Ok((phi_at(prob, &x_probe, &opts)? - phi_at(prob, x, &opts)?) / h)
}

/// Gradients of Φ at `count` points drawn uniformly from B(x0, eps).
/// Points where Φ is not verifiably differentiable (strict complementarity
/// fails, or the ball check at a shrunken radius leaves residual
/// constraints) are re-sampled; gives up after 10×count draws.
pub fn sample_ball_gradients(
    prob: &dyn BilevelProblem,
    x0: &DVec,
    eps: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<DVec>, OracleError> {
    if !(eps > 0.0) {
        return Err(OracleError::Precondition(format!("eps must be positive, got {eps}")));
    }
    if count < prob.d_x() + 1 {
        return Err(OracleError::Precondition(format!(
            "count must be at least d_x+1 = {}, got {count}",
            prob.d_x() + 1
        )));
    }
    let d = prob.d_x();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let opts = oracle_opts();
    let max_attempts = 10 * count;
    let mut grads = Vec::with_capacity(count);
    let mut attempts = 0;
    while grads.len() < count && attempts < max_attempts {
        attempts += 1;
        // Uniform in the ball: gaussian direction, radius eps * U^(1/d).
        let mut dir = DVec::from_fn(d, |_, _| normal(&mut rng));
        let n = dir.norm();
        if n == 0.0 {
            continue;
        }
        dir /= n;
        let radius = eps * rng.gen_range(0.0..1.0f64).powf(1.0 / d as f64);
        let x = x0 + dir * radius;
        let Ok(sol) = solve_lower(prob, &x, None, &opts) else { continue };
        let cls = classify_active_sets(prob, &x, &sol, opts.tol_active);
        if !cls.j_zero.is_empty() {
            continue;
        }
        let Ok(sens) = kkt_gradient(prob, &x, &sol, &cls) else { continue };
        grads.push(phi_gradient(prob, &x, &sol, &sens));
        // Reject points that are only marginally differentiable: the ball
        // check at a tiny radius must clear every constraint.
        let ball = check_differentiability_on_ball(prob, &x, &sol, &cls, &sens, 1e-9, 1e-3);
        if !ball.differentiable() {
            grads.pop();
        }
    }
    if grads.len() < count {
        return Err(OracleError::SamplingExhausted { want: count, attempts });
    }
    Ok(grads)
}

/// Exhaustive search for the min-norm convex combination on a simplex grid
/// of resolution `grid_step`. Guaranteed within diameter·grid_step of the
/// true minimizer, but costs C(K+n-1, n-1) evaluations, so |points| ≤ 6.
pub fn brute_min_norm(points: &[DVec], grid_step: f64) -> Result<DVec, OracleError> {
    if points.is_empty() {
        return Err(OracleError::Precondition("need at least one point".into()));
    }
    if points.len() > 6 {
        return Err(OracleError::Precondition(format!(
            "simplex grid is intractable beyond 6 points, got {}",
            points.len()
        )));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(OracleError::Precondition(format!("grid_step must lie in (0, 1], got {grid_step}")));
    }
    let k = (1.0 / grid_step).round().max(1.0) as usize;
    let dim = points[0].len();
    let mut best = points[0].clone();
    let mut best_norm = f64::INFINITY;
    // Depth-first over compositions of k into |points| parts, accumulating
    // the partial weighted sum on the way down.
    fn descend(
        points: &[DVec],
        k_left: usize,
        idx: usize,
        partial: &DVec,
        k_total: f64,
        best: &mut DVec,
        best_norm: &mut f64,
    ) {
        if idx == points.len() - 1 {
            let candidate = partial + &points[idx] * (k_left as f64 / k_total);
            let n = candidate.norm();
            if n < *best_norm {
                *best_norm = n;
                *best = candidate;
            }
            return;
        }
        for take in 0..=k_left {
            let next = partial + &points[idx] * (take as f64 / k_total);
            descend(points, k_left - take, idx + 1, &next, k_total, best, best_norm);
        }
    }
    descend(points, k, 0, &DVec::zeros(dim), k as f64, &mut best, &mut best_norm);
    Ok(best)
}
