//! Outer descent loop.
//!
//! Each iteration solves the lower level at the current x, asks whether Phi
//! is differentiable on the eps-ball, and forms the step direction g:
//! the plain gradient when the ball is clean (`Differentiable`), or the
//! minimum-norm element of the representative-gradient hull when constraints
//! can switch inside it (`Nonsmooth`). Then exactly one of:
//!
//! * ||g|| <= nu_opt and eps <= eps_opt: terminate;
//! * ||g|| <= nu: null step, shrink eps and nu, stay put (the direction is
//!   not trustworthy at this resolution);
//! * otherwise: backtracking Armijo search along -g and move.
//!
//! Every iteration appends one trace record. CSV output carries the eight
//! columns `k,phi,g_norm,eps,nu,t,branch,wall_ms`; JSON additionally carries
//! x, g, and the active-set snapshot per iteration.

use std::io::Write as IoWrite;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::clarke::{
    build_subgradient_set, check_differentiability_on_ball, min_norm_element, resolve_scsc_point, ClarkeError,
};
use crate::lower::{solve_lower, ActiveSetClassification, LowerError, LowerSolution, SolverOpts};
use crate::problem::BilevelProblem;
use crate::sensitivity::{kkt_gradient, phi_gradient, SensitivityError};
use crate::DVec;

#[derive(Debug, Clone, Serialize)]
pub struct GamConfig {
    /// Initial ball radius.
    pub eps0: f64,
    /// Initial null-step threshold on ||g||.
    pub nu0: f64,
    /// Armijo slope fraction.
    pub beta: f64,
    /// Backtracking ratio; trial steps are gamma, gamma^2, ...
    pub gamma: f64,
    pub theta_eps: f64,
    pub theta_nu: f64,
    /// Termination thresholds: stop once ||g|| <= nu_opt and eps <= eps_opt.
    pub eps_opt: f64,
    pub nu_opt: f64,
    pub max_outer_iters: usize,
    pub max_backtracks: usize,
    /// Safety margin added to every Lipschitz rate estimate.
    pub lipschitz_delta: f64,
    /// Budget for the subset enumeration behind the subdifferential.
    pub max_subsets: usize,
    pub min_norm_tol: f64,
    /// Seed for the degenerate-center perturbations; fixed seed, fixed run.
    pub seed: u64,
    #[serde(skip)]
    pub lower: SolverOpts,
}

impl Default for GamConfig {
    fn default() -> Self {
        Self {
            eps0: 0.3,
            nu0: 1.0,
            beta: 0.5,
            gamma: 0.3,
            theta_eps: 0.5,
            theta_nu: 0.5,
            eps_opt: 1e-4,
            nu_opt: 1e-4,
            max_outer_iters: 500,
            max_backtracks: 40,
            lipschitz_delta: 1e-3,
            max_subsets: 64,
            min_norm_tol: 1e-10,
            seed: 0,
            lower: SolverOpts::default(),
        }
    }
}

impl GamConfig {
    pub fn validate(&self) -> Result<(), GamError> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let complain = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(GamError::Config(format!("invalid {what}")))
            }
        };
        complain(positive(self.eps0), "eps0")?;
        complain(positive(self.nu0), "nu0")?;
        complain(in_unit(self.beta), "beta (want 0 < beta < 1)")?;
        complain(in_unit(self.gamma), "gamma (want 0 < gamma < 1)")?;
        complain(in_unit(self.theta_eps), "theta_eps (want 0 < theta_eps < 1)")?;
        complain(in_unit(self.theta_nu), "theta_nu (want 0 < theta_nu < 1)")?;
        complain(positive(self.eps_opt), "eps_opt")?;
        complain(positive(self.nu_opt), "nu_opt")?;
        complain(self.max_outer_iters > 0, "max_outer_iters")?;
        complain(self.max_backtracks > 0, "max_backtracks")?;
        complain(positive(self.lipschitz_delta), "lipschitz_delta")?;
        complain(self.max_subsets > 0, "max_subsets")?;
        Ok(())
    }
}

/// How the iteration's direction came about (or that no move was attempted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Ball check passed; g is the plain gradient.
    Differentiable,
    /// Constraints can switch on the ball; g is the min-norm hull element.
    Nonsmooth,
    /// ||g|| under the current nu: parameters shrink, x stays (t = 0).
    NullStep,
}

impl Branch {
    fn as_str(self) -> &'static str {
        match self {
            Branch::Differentiable => "differentiable",
            Branch::Nonsmooth => "nonsmooth",
            Branch::NullStep => "null_step",
        }
    }
}

/// One row per outer iteration.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub phi: f64,
    pub g: Vec<f64>,
    pub g_norm: f64,
    pub eps: f64,
    pub nu: f64,
    /// Accepted step length; zero on null steps and on the final row.
    pub t: f64,
    pub branch: Branch,
    pub active_sets: ActiveSetClassification,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct GamResult {
    pub x: DVec,
    pub phi: f64,
    pub g_norm: f64,
    pub eps: f64,
    pub nu: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
    pub lower: LowerSolution,
}

#[derive(Debug, Error)]
pub enum GamError {
    #[error("configuration rejected: {0}")]
    Config(String),
    #[error(
        "line search failed at iteration {k}: {tried} trials, last Armijo gap {last_gap:.3e} (positive means the decrease fell short)"
    )]
    LineSearchFailed {
        k: usize,
        tried: usize,
        /// Phi(x - t g) - (Phi(x) - beta t ||g||^2) at the last trial; NaN
        /// when the trial's lower solve failed outright.
        last_gap: f64,
        /// Partial run up to the failure, for post-mortems.
        result: Box<GamResult>,
    },
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Clarke(#[from] ClarkeError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

pub struct LineSearchOutcome {
    pub t: f64,
    pub phi_new: f64,
    pub x_new: DVec,
    pub sol_new: LowerSolution,
    pub trials: usize,
}

/// Line-search exhaustion diagnostics (see [`GamError::LineSearchFailed`]).
#[derive(Debug, Clone, Copy)]
pub struct LineSearchFailure {
    pub tried: usize,
    pub last_gap: f64,
}

/// Backtracking Armijo search along -g: accepts the first t in
/// {gamma, gamma^2, ...} with Phi(x - t g) < Phi(x) - beta t ||g||^2.
/// Trial solves are warm-started from the incumbent solution; a trial whose
/// lower solve fails is rejected like a failed decrease and backtracking
/// continues.
pub fn line_search(
    prob: &dyn BilevelProblem,
    x: &DVec,
    phi0: f64,
    g: &DVec,
    warm: &LowerSolution,
    config: &GamConfig,
) -> Result<LineSearchOutcome, LineSearchFailure> {
    let gg = g.norm_squared();
    assert!(gg > 0.0, "line search needs a nonzero direction");
    let mut t = config.gamma;
    let mut last_gap = f64::NAN;
    for trial in 1..=config.max_backtracks {
        let x_new = x - t * g;
        match solve_lower(prob, &x_new, Some(warm), &config.lower) {
            Ok(sol) => {
                let phi_new = prob.f(&x_new, &sol.y_star);
                last_gap = phi_new - (phi0 - config.beta * t * gg);
                if last_gap < 0.0 {
                    return Ok(LineSearchOutcome { t, phi_new, x_new, sol_new: sol, trials: trial });
                }
            }
            Err(_) => last_gap = f64::NAN,
        }
        t *= config.gamma;
    }
    Err(LineSearchFailure { tried: config.max_backtracks, last_gap })
}

/// Step-length policy for accepted directions.
pub enum StepRule<'a> {
    /// Backtracking Armijo (the default; guarantees the descent condition).
    Armijo,
    /// Fixed schedule t = lr(k), acceptance unchecked. Direction logic is
    /// identical; meant for scales where per-step line searches are too
    /// expensive to justify.
    Fixed(&'a dyn Fn(usize) -> f64),
}

/// Runs the descent loop from x0 with Armijo steps. A result with
/// `converged == false` means the iteration cap ran out; hard failures
/// surface as errors, the line-search one carrying the partial trace.
pub fn run(prob: &dyn BilevelProblem, x0: &DVec, config: &GamConfig) -> Result<GamResult, GamError> {
    run_with_step_rule(prob, x0, config, StepRule::Armijo)
}

pub fn run_with_step_rule(
    prob: &dyn BilevelProblem,
    x0: &DVec,
    config: &GamConfig,
    rule: StepRule,
) -> Result<GamResult, GamError> {
    config.validate()?;
    assert_eq!(x0.len(), prob.d_x(), "x0 dimension mismatch");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut eps = config.eps0;
    let mut nu = config.nu0;
    let mut trace: Vec<TraceRecord> = Vec::new();

    // Solve-state for the current x, reused across null steps.
    let mut center = resolve_scsc_point(prob, x0, None, &config.lower, &mut rng, 8)?;
    let mut x = center.0.clone();
    let mut converged = false;
    let mut last_g_norm = f64::NAN;

    let mut k = 0;
    while k < config.max_outer_iters {
        let tick = Instant::now();
        let (_, ref sol, ref cls) = center;
        let phi = prob.f(&x, &sol.y_star);

        let sens = kkt_gradient(prob, &x, sol, cls)?;
        let ball = check_differentiability_on_ball(prob, &x, sol, cls, &sens, eps, config.lipschitz_delta);
        let (g, mut branch) = if ball.differentiable() {
            (phi_gradient(prob, &x, sol, &sens), Branch::Differentiable)
        } else {
            let set = build_subgradient_set(prob, &x, sol, &ball, config.max_subsets)?;
            (min_norm_element(&set.gradients, config.min_norm_tol)?.point, Branch::Nonsmooth)
        };
        let g_norm = g.norm();
        last_g_norm = g_norm;

        let stop = g_norm <= config.nu_opt && eps <= config.eps_opt;
        let null = !stop && g_norm <= nu;
        if null {
            branch = Branch::NullStep;
        }
        let mut record = TraceRecord {
            k,
            x: x.as_slice().to_vec(),
            phi,
            g: g.as_slice().to_vec(),
            g_norm,
            eps,
            nu,
            t: 0.0,
            branch,
            active_sets: cls.clone(),
            wall_ms: 0.0,
        };

        if stop {
            converged = true;
            record.wall_ms = tick.elapsed().as_secs_f64() * 1e3;
            trace.push(record);
            break;
        }
        if null {
            eps *= config.theta_eps;
            nu *= config.theta_nu;
            record.wall_ms = tick.elapsed().as_secs_f64() * 1e3;
            trace.push(record);
            k += 1;
            continue;
        }

        match &rule {
            StepRule::Armijo => match line_search(prob, &x, phi, &g, sol, config) {
                Ok(out) => {
                    record.t = out.t;
                    record.wall_ms = tick.elapsed().as_secs_f64() * 1e3;
                    trace.push(record);
                    center = resolve_scsc_point(prob, &out.x_new, Some(&out.sol_new), &config.lower, &mut rng, 8)?;
                    x = center.0.clone();
                }
                Err(fail) => {
                    record.wall_ms = tick.elapsed().as_secs_f64() * 1e3;
                    trace.push(record);
                    let result = finalize(prob, x, eps, nu, last_g_norm, k + 1, false, trace, center.1);
                    return Err(GamError::LineSearchFailed {
                        k,
                        tried: fail.tried,
                        last_gap: fail.last_gap,
                        result: Box::new(result),
                    });
                }
            },
            StepRule::Fixed(lr) => {
                let t = lr(k);
                assert!(t > 0.0, "fixed step schedule must stay positive");
                let x_new = &x - t * &g;
                record.t = t;
                record.wall_ms = tick.elapsed().as_secs_f64() * 1e3;
                trace.push(record);
                let warm = center.1.clone();
                center = resolve_scsc_point(prob, &x_new, Some(&warm), &config.lower, &mut rng, 8)?;
                x = center.0.clone();
            }
        }
        k += 1;
    }

    let sol = center.1;
    Ok(finalize(prob, x, eps, nu, last_g_norm, trace.len(), converged, trace, sol))
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    prob: &dyn BilevelProblem,
    x: DVec,
    eps: f64,
    nu: f64,
    g_norm: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<TraceRecord>,
    lower: LowerSolution,
) -> GamResult {
    let phi = prob.f(&x, &lower.y_star);
    GamResult { x, phi, g_norm, eps, nu, iterations, converged, trace, lower }
}

pub const TRACE_HEADER: &str = "k,phi,g_norm,eps,nu,t,branch,wall_ms";

pub fn write_trace_csv<W: IoWrite>(trace: &[TraceRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.k,
            r.phi,
            r.g_norm,
            r.eps,
            r.nu,
            r.t,
            r.branch.as_str(),
            r.wall_ms
        )?;
    }
    w.flush()
}

pub fn write_trace_json<W: IoWrite>(trace: &[TraceRecord], w: W) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(w, trace)
}
