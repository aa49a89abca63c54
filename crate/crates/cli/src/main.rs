//! Command-line front end: `gam run` executes the solver and writes traces,
//! `gam verify` audits a problem's derivative callbacks and the solver
//! components against independent oracles.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gam_core::clarke::{build_subgradient_set, check_differentiability_on_ball, min_norm_element};
use gam_core::gam::{self, GamConfig, GamError, GamResult};
use gam_core::lower::{classify_active_sets, solve_lower, SolverOpts};
use gam_core::oracle::{brute_min_norm, fd_phi_gradient};
use gam_core::problem::validate_problem;
use gam_core::problems::{
    make_bilevel_qp, make_example1, make_hyperclean_toy, Dataset, Kernel, QpProblem, QpReference,
    SvmDual, SvmPrimal,
};
use gam_core::sensitivity::{kkt_gradient, phi_gradient};
use gam_core::{BilevelProblem, DMat, DVec};

#[derive(Parser)]
#[command(name = "gam", version, about = "Bilevel solver via Clarke subdifferential approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem and write the iteration trace
    Run(RunArgs),
    /// Audit derivative callbacks and solver components against oracles
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Built-in problem: example1 | qp | svm-toy | hyperclean | svm
    #[arg(long)]
    problem: Option<String>,
    /// TOML config (JSON accepted); command-line flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point, comma-separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    nu0: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    theta_eps: Option<f64>,
    #[arg(long)]
    theta_nu: Option<f64>,
    #[arg(long)]
    eps_opt: Option<f64>,
    #[arg(long)]
    nu_opt: Option<f64>,
    /// Outer iteration cap
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    lipschitz_delta: Option<f64>,
    /// KKT tolerance for the lower-level solver
    #[arg(long)]
    lower_tol: Option<f64>,
    /// Active-set classification tolerance
    #[arg(long)]
    tol_active: Option<f64>,
    /// Trace output path; a .json extension selects JSON, anything else CSV
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, comma-separated; each seed is an independent run
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Worker threads for seed sweeps
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Built-in problem: example1 | qp | svm-toy | hyperclean | svm
    #[arg(long)]
    problem: Option<String>,
    /// TOML config (JSON accepted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Config-file schema; every field optional, flags win.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    problem: Option<String>,
    /// Path to a JSON declaration of a QP instance (problem = "qp")
    qp_path: Option<String>,
    /// CSV datasets for problem = "svm"
    train_csv: Option<String>,
    val_csv: Option<String>,
    kernel: Option<KernelConfig>,
    mu_b: Option<f64>,
    x0: Option<Vec<f64>>,
    out: Option<String>,
    seed: Option<Vec<u64>>,
    jobs: Option<usize>,
    #[serde(default)]
    gam: GamOverrides,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GamOverrides {
    eps0: Option<f64>,
    nu0: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    theta_eps: Option<f64>,
    theta_nu: Option<f64>,
    eps_opt: Option<f64>,
    nu_opt: Option<f64>,
    max_iters: Option<usize>,
    max_backtracks: Option<usize>,
    max_subsets: Option<usize>,
    min_norm_tol: Option<f64>,
    lipschitz_delta: Option<f64>,
    lower_tol: Option<f64>,
    tol_active: Option<f64>,
    lower_max_iters: Option<usize>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum KernelConfig {
    Linear,
    Polynomial { gamma: f64, r: f64, degree: u32 },
}

impl From<KernelConfig> for Kernel {
    fn from(k: KernelConfig) -> Kernel {
        match k {
            KernelConfig::Linear => Kernel::Linear,
            KernelConfig::Polynomial { gamma, r, degree } => Kernel::Polynomial { gamma, r, degree },
        }
    }
}

/// Exit codes: 0 success, 1 solver or verification failure, 2 bad configuration.
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

fn config_err<T: std::fmt::Display>(e: T) -> CliError {
    CliError::Config(e.to_string())
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    match toml::from_str::<FileConfig>(&text) {
        Ok(cfg) => Ok(cfg),
        Err(toml_err) => serde_json::from_str::<FileConfig>(&text).map_err(|json_err| {
            CliError::Config(format!(
                "config {} is neither valid TOML ({toml_err}) nor JSON ({json_err})",
                path.display()
            ))
        }),
    }
}

fn merge_gam_config(file: &GamOverrides, args: &RunArgs) -> Result<GamConfig, CliError> {
    let mut cfg = GamConfig::default();
    macro_rules! apply {
        ($field:ident, $file:expr, $flag:expr) => {
            if let Some(v) = $file {
                cfg.$field = v;
            }
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    apply!(eps0, file.eps0, args.eps0);
    apply!(nu0, file.nu0, args.nu0);
    apply!(beta, file.beta, args.beta);
    apply!(gamma, file.gamma, args.gamma);
    apply!(theta_eps, file.theta_eps, args.theta_eps);
    apply!(theta_nu, file.theta_nu, args.theta_nu);
    apply!(eps_opt, file.eps_opt, args.eps_opt);
    apply!(nu_opt, file.nu_opt, args.nu_opt);
    apply!(max_outer_iters, file.max_iters, args.max_iters);
    apply!(lipschitz_delta, file.lipschitz_delta, args.lipschitz_delta);
    if let Some(v) = file.max_backtracks {
        cfg.max_backtracks = v;
    }
    if let Some(v) = file.max_subsets {
        cfg.max_subsets = v;
    }
    if let Some(v) = file.min_norm_tol {
        cfg.min_norm_tol = v;
    }
    if let Some(v) = args.lower_tol.or(file.lower_tol) {
        cfg.lower.tol_kkt = v;
    }
    if let Some(v) = args.tol_active.or(file.tol_active) {
        cfg.lower.tol_active = v;
    }
    if let Some(v) = file.lower_max_iters {
        cfg.lower.max_iters = v;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

#[derive(Clone, Copy, PartialEq)]
enum ProblemKind {
    Example1,
    Qp,
    SvmToy,
    Hyperclean,
    SvmCsv,
}

fn parse_kind(name: &str) -> Result<ProblemKind, CliError> {
    match name {
        "example1" => Ok(ProblemKind::Example1),
        "qp" => Ok(ProblemKind::Qp),
        "svm-toy" => Ok(ProblemKind::SvmToy),
        "hyperclean" => Ok(ProblemKind::Hyperclean),
        "svm" => Ok(ProblemKind::SvmCsv),
        other => Err(CliError::Config(format!(
            "unknown problem `{other}` (expected example1, qp, svm-toy, hyperclean, or svm)"
        ))),
    }
}

struct Built {
    prob: Box<dyn BilevelProblem>,
    default_x0: DVec,
    /// Instance copy plus exhaustive reference, for the random QP family.
    qp_reference: Option<(QpProblem, QpReference)>,
}

fn build_problem(kind: ProblemKind, file: &FileConfig, seed: u64) -> Result<Built, CliError> {
    let kernel: Kernel = file.kernel.map_or(Kernel::Linear, Into::into);
    let mu_b = file.mu_b.unwrap_or(gam_core::problems::svm::DEFAULT_MU_B);
    match kind {
        ProblemKind::Example1 => Ok(Built {
            prob: Box::new(make_example1()),
            default_x0: DVec::from_vec(vec![2.0]),
            qp_reference: None,
        }),
        ProblemKind::Qp => {
            if let Some(path) = &file.qp_path {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read qp declaration {path}: {e}")))?;
                let prob = QpProblem::from_json(&text).map_err(config_err)?;
                let d_x = prob.d_x();
                Ok(Built { prob: Box::new(prob), default_x0: DVec::zeros(d_x), qp_reference: None })
            } else {
                let (prob, reference) = make_bilevel_qp(seed, 3, 4, 3, 0);
                Ok(Built {
                    prob: Box::new(prob.clone()),
                    default_x0: DVec::zeros(3),
                    qp_reference: Some((prob, reference)),
                })
            }
        }
        ProblemKind::SvmToy => {
            let train = Dataset::synthetic_two_gaussians(10, 2, 1.0, seed);
            let val = Dataset::synthetic_two_gaussians(10, 2, 1.0, seed.wrapping_add(1));
            let prob: Box<dyn BilevelProblem> = match kernel {
                Kernel::Linear => Box::new(SvmPrimal::new(train, val, mu_b).map_err(config_err)?),
                k => Box::new(SvmDual::new(train, val, k, mu_b).map_err(config_err)?),
            };
            Ok(Built { prob, default_x0: DVec::zeros(10), qp_reference: None })
        }
        ProblemKind::Hyperclean => {
            let (prob, _) = make_hyperclean_toy(seed);
            Ok(Built { prob: Box::new(prob), default_x0: DVec::zeros(20), qp_reference: None })
        }
        ProblemKind::SvmCsv => {
            let (Some(train_path), Some(val_path)) = (&file.train_csv, &file.val_csv) else {
                return Err(CliError::Config(
                    "problem `svm` needs train_csv and val_csv in the config file".into(),
                ));
            };
            let read = |p: &String| -> Result<Dataset, CliError> {
                let fh = fs::File::open(p).map_err(|e| CliError::Config(format!("cannot open {p}: {e}")))?;
                Dataset::from_csv(fh).map_err(config_err)
            };
            let train = read(train_path)?;
            let val = read(val_path)?;
            let d_x = train.len();
            let prob = gam_core::problems::make_svm_hyperopt(train, val, kernel, mu_b).map_err(config_err)?;
            Ok(Built { prob, default_x0: DVec::zeros(d_x), qp_reference: None })
        }
    }
}

fn out_path_for_seed(base: &Path, seed: u64, multi: bool) -> PathBuf {
    if !multi {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let ext = base.extension().and_then(|s| s.to_str());
    let name = match ext {
        Some(e) => format!("{stem}-{seed}.{e}"),
        None => format!("{stem}-{seed}"),
    };
    base.with_file_name(name)
}

fn write_trace(result: &GamResult, path: &Path) -> Result<(), CliError> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let w = BufWriter::new(file);
    let is_json = path.extension().and_then(|s| s.to_str()) == Some("json");
    if is_json {
        gam::write_trace_json(&result.trace, w)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    } else {
        gam::write_trace_csv(&result.trace, w)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

fn summarize(prefix: &str, result: &GamResult) -> String {
    format!(
        "{prefix}phi={:.6e} g_norm={:.3e} eps={:.3e} nu={:.3e} iters={} converged={}",
        result.phi, result.g_norm, result.eps, result.nu, result.iterations, result.converged
    )
}

fn run_one(kind: ProblemKind, file: &FileConfig, cfg: &GamConfig, x0: Option<&DVec>, seed: u64, out: Option<&Path>, multi: bool) -> Result<String, CliError> {
    let built = build_problem(kind, file, seed)?;
    let x0 = match x0 {
        Some(v) => {
            if v.len() != built.prob.d_x() {
                return Err(CliError::Config(format!(
                    "x0 has {} entries but the problem has d_x = {}",
                    v.len(),
                    built.prob.d_x()
                )));
            }
            v.clone()
        }
        None => built.default_x0.clone(),
    };
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let result = match gam::run(built.prob.as_ref(), &x0, &cfg) {
        Ok(r) => r,
        Err(GamError::Config(msg)) => return Err(CliError::Config(msg)),
        Err(GamError::LineSearchFailed { k, tried, last_gap, result }) => {
            if let Some(out) = out {
                write_trace(&result, &out_path_for_seed(out, seed, multi))?;
            }
            return Err(CliError::Runtime(format!(
                "seed {seed}: line search failed at iteration {k} after {tried} trials (last gap {last_gap:.3e})"
            )));
        }
        Err(e) => return Err(CliError::Runtime(format!("seed {seed}: {e}"))),
    };
    if let Some(out) = out {
        write_trace(&result, &out_path_for_seed(out, seed, multi))?;
    }
    Ok(summarize(&format!("seed {seed}: "), &result))
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let name = args
        .problem
        .clone()
        .or_else(|| file.problem.clone())
        .ok_or_else(|| CliError::Config("no problem given (use --problem or a config file)".into()))?;
    let kind = parse_kind(&name)?;
    let cfg = merge_gam_config(&file.gam, args)?;
    let x0 = args
        .x0
        .clone()
        .or_else(|| file.x0.clone())
        .map(DVec::from_vec);
    let seeds = args.seed.clone().or_else(|| file.seed.clone()).unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(CliError::Config("empty seed list".into()));
    }
    let jobs = args.jobs.or(file.jobs).unwrap_or(1).max(1);
    let out = args.out.clone().or_else(|| file.out.clone().map(PathBuf::from));
    let multi = seeds.len() > 1;

    let mut lines: Vec<(usize, Result<String, CliError>)> = Vec::new();
    if jobs == 1 || seeds.len() == 1 {
        for (i, &seed) in seeds.iter().enumerate() {
            lines.push((i, run_one(kind, &file, &cfg, x0.as_ref(), seed, out.as_deref(), multi)));
        }
    } else {
        let workers = jobs.min(seeds.len());
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|scope| {
            for w in 0..workers {
                let tx = tx.clone();
                let seeds = &seeds;
                let file = &file;
                let cfg = &cfg;
                let x0 = x0.as_ref();
                let out = out.as_deref();
                scope.spawn(move || {
                    for i in (w..seeds.len()).step_by(workers) {
                        let r = run_one(kind, file, cfg, x0, seeds[i], out, multi);
                        let _ = tx.send((i, r));
                    }
                });
            }
            drop(tx);
            for item in rx {
                lines.push(item);
            }
        });
    }
    lines.sort_by_key(|(i, _)| *i);
    let mut failure: Option<CliError> = None;
    for (_, line) in lines {
        match line {
            Ok(text) => println!("{text}"),
            Err(e) => {
                eprintln!("error: {}", e.message());
                // Config errors outrank runtime ones when both occur.
                let worse = match (&failure, &e) {
                    (None, _) => true,
                    (Some(CliError::Runtime(_)), CliError::Config(_)) => true,
                    _ => false,
                };
                if worse {
                    failure = Some(e);
                }
            }
        }
    }
    match failure {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

// --- verify ---------------------------------------------------------------

/// Example 1 with a deliberately wrong gradient callback; the derivative
/// check must catch it, proving the audit has teeth.
struct CorruptedExample1(gam_core::problems::Example1);

impl BilevelProblem for CorruptedExample1 {
    fn d_x(&self) -> usize {
        self.0.d_x()
    }
    fn d_y(&self) -> usize {
        self.0.d_y()
    }
    fn m(&self) -> usize {
        self.0.m()
    }
    fn mu(&self) -> f64 {
        self.0.mu()
    }
    fn f(&self, x: &DVec, y: &DVec) -> f64 {
        self.0.f(x, y)
    }
    fn grad_x_f(&self, x: &DVec, y: &DVec) -> DVec {
        self.0.grad_x_f(x, y)
    }
    fn grad_y_f(&self, x: &DVec, y: &DVec) -> DVec {
        self.0.grad_y_f(x, y)
    }
    fn g(&self, x: &DVec, y: &DVec) -> f64 {
        self.0.g(x, y)
    }
    fn grad_y_g(&self, x: &DVec, y: &DVec) -> DVec {
        self.0.grad_y_g(x, y).add_scalar(0.01)
    }
    fn hess_yy_g(&self, x: &DVec, y: &DVec) -> DMat {
        self.0.hess_yy_g(x, y)
    }
    fn hess_xy_g(&self, x: &DVec, y: &DVec) -> DMat {
        self.0.hess_xy_g(x, y)
    }
    fn p(&self, x: &DVec, y: &DVec) -> DVec {
        self.0.p(x, y)
    }
    fn jac_y_p(&self, x: &DVec, y: &DVec) -> DMat {
        self.0.jac_y_p(x, y)
    }
    fn jac_x_p(&self, x: &DVec, y: &DVec) -> DMat {
        self.0.jac_x_p(x, y)
    }
}

struct CheckRow {
    name: &'static str,
    result: Result<(), String>,
}

fn sample_points(prob: &dyn BilevelProblem, seed: u64, count: usize, x_range: f64, y_range: f64) -> Vec<(DVec, DVec)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (
                DVec::from_fn(prob.d_x(), |_, _| rng.gen_range(-x_range..x_range)),
                DVec::from_fn(prob.d_y(), |_, _| rng.gen_range(-y_range..y_range)),
            )
        })
        .collect()
}

fn check_callbacks(prob: &dyn BilevelProblem, seed: u64) -> Result<(), String> {
    let pts = sample_points(prob, seed.wrapping_add(17), 3, 0.5, 1.0);
    let report = validate_problem(prob, &pts);
    if report.passed() {
        Ok(())
    } else {
        Err(format!("{report:?}"))
    }
}

fn check_lower_solver(prob: &dyn BilevelProblem, xs: &[DVec]) -> Result<(), String> {
    let opts = SolverOpts::default();
    for x in xs {
        let sol = solve_lower(prob, x, None, &opts).map_err(|e| e.to_string())?;
        if !sol.converged || sol.kkt_residual > 1e-8 {
            return Err(format!("residual {:.3e} at x = {x:?}", sol.kkt_residual));
        }
    }
    Ok(())
}

fn check_implicit_gradient(prob: &dyn BilevelProblem, xs: &[DVec]) -> Result<(), String> {
    let opts = SolverOpts::default();
    let mut compared = 0;
    for x in xs {
        let sol = solve_lower(prob, x, None, &opts).map_err(|e| e.to_string())?;
        let cls = classify_active_sets(prob, x, &sol, opts.tol_active);
        if !cls.j_zero.is_empty() {
            continue; // nonsmooth point; the finite-difference probe is meaningless
        }
        let sens = kkt_gradient(prob, x, &sol, &cls).map_err(|e| e.to_string())?;
        let analytic = phi_gradient(prob, x, &sol, &sens);
        let fd = fd_phi_gradient(prob, x, 1e-5).map_err(|e| e.to_string())?;
        let rel = (&analytic - &fd).norm() / fd.norm().max(1.0);
        if rel > 1e-4 {
            return Err(format!("relative error {rel:.3e} at x = {x:?}"));
        }
        compared += 1;
    }
    if compared == 0 {
        return Err("no strictly complementary probe points found".into());
    }
    Ok(())
}

fn check_example1_analytic() -> Result<(), String> {
    let prob = make_example1();
    let opts = SolverOpts::default();
    for &x in &[-2.0, -1.5, -0.5, -0.1, 0.3, 1.0, 2.0] {
        let xv = DVec::from_vec(vec![x]);
        let sol = solve_lower(&prob, &xv, None, &opts).map_err(|e| e.to_string())?;
        let y_exact = gam_core::problems::Example1::y_star_exact(x);
        let lam_exact = gam_core::problems::Example1::lambda_exact(x);
        if (sol.y_star[0] - y_exact).abs() > 1e-7 || (sol.lambda[0] - lam_exact).abs() > 1e-7 {
            return Err(format!(
                "x = {x}: got (y, lambda) = ({:.9}, {:.9}), want ({y_exact:.9}, {lam_exact:.9})",
                sol.y_star[0], sol.lambda[0]
            ));
        }
    }
    Ok(())
}

fn check_example1_representatives() -> Result<(), String> {
    let prob = make_example1();
    let opts = SolverOpts::default();
    let x0 = -0.98;
    let eps = 0.1;
    let xv = DVec::from_vec(vec![x0]);
    let sol = solve_lower(&prob, &xv, None, &opts).map_err(|e| e.to_string())?;
    let cls = classify_active_sets(&prob, &xv, &sol, opts.tol_active);
    let sens = kkt_gradient(&prob, &xv, &sol, &cls).map_err(|e| e.to_string())?;
    let ball = check_differentiability_on_ball(&prob, &xv, &sol, &cls, &sens, eps, 1e-3);
    let set = build_subgradient_set(&prob, &xv, &sol, &ball, 64).map_err(|e| e.to_string())?;
    let mut got: Vec<f64> = set.gradients.iter().map(|g| g[0]).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let want = [2.0 * x0, -1.0];
    if got.len() != 2 || (got[0] - want[0]).abs() > 1e-6 || (got[1] - want[1]).abs() > 1e-6 {
        return Err(format!("G = {got:?}, want {want:?}"));
    }
    Ok(())
}

fn check_qp_reference(prob: &QpProblem, reference: &QpReference, seed: u64) -> Result<(), String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let opts = SolverOpts::default();
    for _ in 0..3 {
        let x = DVec::from_fn(prob.d_x(), |_, _| rng.gen_range(-1.0..1.0));
        let sol = solve_lower(prob, &x, None, &opts).map_err(|e| e.to_string())?;
        let (y_ref, lam_ref, _) = reference
            .solve(&x)
            .ok_or_else(|| "exhaustive reference found no KKT point".to_string())?;
        if (&sol.y_star - &y_ref).amax() > 1e-6 || (&sol.lambda - &lam_ref).amax() > 1e-6 {
            return Err(format!("interior point and reference disagree at x = {x:?}"));
        }
    }
    Ok(())
}

fn check_min_norm_against_brute(seed: u64) -> Result<(), String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    let grid = 0.02;
    for case in 0..5 {
        let n = rng.gen_range(2..=5);
        let dim = rng.gen_range(2..=4);
        let points: Vec<DVec> = (0..n)
            .map(|_| {
                let v = DVec::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
                let norm = v.norm();
                if norm > 1.0 {
                    v / norm
                } else {
                    v
                }
            })
            .collect();
        let fast = min_norm_element(&points, 1e-10).map_err(|e| e.to_string())?;
        let brute = brute_min_norm(&points, grid).map_err(|e| e.to_string())?;
        let gap = (fast.point.norm() - brute.norm()).abs();
        if gap > 2.0 * grid {
            return Err(format!("case {case}: norm gap {gap:.4} exceeds {}", 2.0 * grid));
        }
        if fast.certificate > 1e-9 {
            return Err(format!("case {case}: optimality certificate {:.3e}", fast.certificate));
        }
    }
    Ok(())
}

fn check_corrupted_fixture() -> Result<(), String> {
    let bad = CorruptedExample1(make_example1());
    let pts = sample_points(&bad, 23, 3, 1.0, 1.5);
    let report = validate_problem(&bad, &pts);
    if report.passed() {
        Err("corrupted gradient callback slipped through the derivative check".into())
    } else {
        Ok(())
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let name = args
        .problem
        .clone()
        .or_else(|| file.problem.clone())
        .unwrap_or_else(|| "example1".into());
    let kind = parse_kind(&name)?;
    let seed = args.seed.unwrap_or(0);
    let built = build_problem(kind, &file, seed)?;
    let prob = built.prob.as_ref();

    // Probe points for the solver and gradient checks.
    let xs: Vec<DVec> = match kind {
        ProblemKind::Example1 => [-2.0, -0.5, 0.3, 1.0, 2.0]
            .iter()
            .map(|&x| DVec::from_vec(vec![x]))
            .collect(),
        _ => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
            (0..4)
                .map(|_| DVec::from_fn(prob.d_x(), |_, _| rng.gen_range(-0.4..0.4)))
                .collect()
        }
    };

    let mut rows = vec![
        CheckRow { name: "derivative callbacks vs finite differences", result: check_callbacks(prob, seed) },
        CheckRow { name: "lower solver KKT residual", result: check_lower_solver(prob, &xs) },
        CheckRow { name: "implicit gradient vs finite differences", result: check_implicit_gradient(prob, &xs) },
    ];
    if kind == ProblemKind::Example1 {
        rows.push(CheckRow { name: "analytic lower solution branches", result: check_example1_analytic() });
        rows.push(CheckRow {
            name: "representative gradient set at the kink",
            result: check_example1_representatives(),
        });
    }
    if let Some((qp, reference)) = &built.qp_reference {
        rows.push(CheckRow {
            name: "interior point vs exhaustive active-set reference",
            result: check_qp_reference(qp, reference, seed),
        });
    }
    rows.push(CheckRow { name: "min-norm element vs simplex brute force", result: check_min_norm_against_brute(seed) });
    rows.push(CheckRow { name: "corrupted-callback self-test", result: check_corrupted_fixture() });

    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut all_ok = true;
    println!("verify: problem={name} seed={seed}");
    for row in &rows {
        match &row.result {
            Ok(()) => println!("  {:width$}  pass", row.name),
            Err(why) => {
                all_ok = false;
                println!("  {:width$}  FAIL: {why}", row.name);
            }
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Runtime("verification failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
