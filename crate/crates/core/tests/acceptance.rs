//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (visible with `--nocapture`) and enforcing its runtime
//! budget. Tolerances are pinned here, not imported, so regressions cannot
//! hide behind a constant change elsewhere.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gam_core::clarke::{
    build_subgradient_set, check_differentiability_on_ball, min_norm_element, resolve_scsc_point,
};
use gam_core::gam::{run, Branch, GamConfig};
use gam_core::lower::{classify_active_sets, solve_lower, SolverOpts};
use gam_core::oracle::{brute_min_norm, fd_phi_directional, fd_phi_gradient, sample_ball_gradients};
use gam_core::problems::{make_bilevel_qp, make_example1, make_hyperclean_toy, Example1, QpProblem};
use gam_core::sensitivity::{
    directional_derivative, kkt_gradient, phi_gradient, solve_saddle_block, DirectionalOpts,
    SaddleMethod,
};
use gam_core::{BilevelProblem, DMat, DVec};

fn report(criterion: usize, label: &str, budget: Duration, body: impl FnOnce() -> Result<(), String>) {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let within_budget = elapsed <= budget;
    match (&outcome, within_budget) {
        (Ok(()), true) => println!("criterion {criterion} ({label}): PASS [{elapsed:.2?}]"),
        (Ok(()), false) => println!(
            "criterion {criterion} ({label}): FAIL [budget {budget:.0?} exceeded: {elapsed:.2?}]"
        ),
        (Err(why), _) => println!("criterion {criterion} ({label}): FAIL [{why}] [{elapsed:.2?}]"),
    }
    if let Err(why) = outcome {
        panic!("criterion {criterion} failed: {why}");
    }
    assert!(
        within_budget,
        "criterion {criterion} exceeded its {budget:.0?} budget: {elapsed:.2?}"
    );
}

#[test]
fn criterion_1_analytic_lower_solution() {
    report(1, "Example 1 analytic agreement", Duration::from_secs(1), || {
        let prob = make_example1();
        let opts = SolverOpts::default();
        for &x in &[-2.0, -1.5, -1.0, -0.5, -0.1, 0.0, 0.3, 1.0, 2.0] {
            let xv = DVec::from_vec(vec![x]);
            let sol = solve_lower(&prob, &xv, None, &opts).map_err(|e| e.to_string())?;
            let y_want = Example1::y_star_exact(x);
            let lam_want = Example1::lambda_exact(x);
            if (sol.y_star[0] - y_want).abs() > 1e-7 {
                return Err(format!("y*({x}) = {}, want {y_want}", sol.y_star[0]));
            }
            if (sol.lambda[0] - lam_want).abs() > 1e-7 {
                return Err(format!("lambda({x}) = {}, want {lam_want}", sol.lambda[0]));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_2_representative_gradients() {
    report(2, "representative-gradient reproduction", Duration::from_secs(1), || {
        let prob = make_example1();
        let opts = SolverOpts::default();
        let x0 = -1.0 + 0.02;
        let eps = 0.1;
        let xv = DVec::from_vec(vec![x0]);
        let sol = solve_lower(&prob, &xv, None, &opts).map_err(|e| e.to_string())?;
        let cls = classify_active_sets(&prob, &xv, &sol, opts.tol_active);
        let sens = kkt_gradient(&prob, &xv, &sol, &cls).map_err(|e| e.to_string())?;
        let ball = check_differentiability_on_ball(&prob, &xv, &sol, &cls, &sens, eps, 1e-3);
        if ball.differentiable() {
            return Err("ball check missed the nearby kink".into());
        }
        let set = build_subgradient_set(&prob, &xv, &sol, &ball, 64).map_err(|e| e.to_string())?;
        let mut got: Vec<f64> = set.gradients.iter().map(|g| g[0]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = [2.0 * x0, -1.0];
        if got.len() != 2 {
            return Err(format!("expected two members, got {got:?}"));
        }
        for (g, w) in got.iter().zip(&want) {
            if (g - w).abs() > 1e-6 {
                return Err(format!("G = {got:?}, want {want:?}"));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_3_gradient_correctness() {
    report(3, "gradient vs finite differences on random QPs", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let opts = SolverOpts::default();
        let mut passed = 0;
        let mut attempts = 0;
        while passed < 20 {
            attempts += 1;
            if attempts > 200 {
                return Err(format!("only {passed} usable instances in {attempts} attempts"));
            }
            let (prob, _) = make_bilevel_qp(attempts as u64, 2, 3, 2, 0);
            let x = DVec::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let Ok(sol) = solve_lower(&prob, &x, None, &opts) else { continue };
            let cls = classify_active_sets(&prob, &x, &sol, opts.tol_active);
            if !cls.j_zero.is_empty() {
                continue;
            }
            let Ok(sens) = kkt_gradient(&prob, &x, &sol, &cls) else { continue };
            let ball = check_differentiability_on_ball(&prob, &x, &sol, &cls, &sens, 1e-4, 1e-3);
            if !ball.differentiable() {
                continue;
            }

            let analytic = phi_gradient(&prob, &x, &sol, &sens);
            let fd = fd_phi_gradient(&prob, &x, 1e-5).map_err(|e| e.to_string())?;
            let rel = (&analytic - &fd).norm() / fd.norm().max(1e-12);
            if rel > 1e-4 {
                return Err(format!("instance {attempts}: gradient relative error {rel:.3e}"));
            }

            let mut d = DVec::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            d /= d.norm();
            let dd = directional_derivative(&prob, &x, &sol, &cls, &d, &DirectionalOpts::default())
                .map_err(|e| e.to_string())?;
            let fd_dir = fd_phi_directional(&prob, &x, &d, 1e-6).map_err(|e| e.to_string())?;
            if (dd.dphi - fd_dir).abs() > 1e-3 * fd_dir.abs().max(1.0) {
                return Err(format!(
                    "instance {attempts}: directional {} vs one-sided fd {fd_dir}",
                    dd.dphi
                ));
            }
            passed += 1;
        }
        Ok(())
    });
}

/// Interval hull of a set of scalar gradients.
fn hull_1d(gradients: &[DVec]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for g in gradients {
        lo = lo.min(g[0]);
        hi = hi.max(g[0]);
    }
    (lo, hi)
}

#[test]
fn criterion_4_order_eps_approximation() {
    report(4, "order-eps approximation of the eps-subdifferential", Duration::from_secs(60), || {
        // Hausdorff distance between conv G(x0, eps) and the sampled
        // eps-subdifferential hull; both sets contain each other's
        // distance-to-origin witnesses at these centers, so the scalar
        // |d(0, conv G) - d(0, sampled hull)| is identically zero and the
        // interval endpoints carry the order-eps content instead.
        let radii = [0.2, 0.1, 0.05, 0.025];
        let example1 = make_example1();
        let degenerate = QpProblem::degenerate_at_origin();
        let cases: [(&dyn BilevelProblem, f64, &str); 3] = [
            (&example1, -1.0, "example1 @ -1"),
            (&example1, 0.0, "example1 @ 0"),
            (&degenerate, 0.0, "degenerate qp @ 0"),
        ];
        let opts = SolverOpts::default();
        for (prob, x0, label) in cases {
            let mut gaps = Vec::new();
            for (i, &eps) in radii.iter().enumerate() {
                let xv = DVec::from_vec(vec![x0]);
                let mut rng = ChaCha8Rng::seed_from_u64(7 + i as u64);
                let (x, sol, cls) = resolve_scsc_point(prob, &xv, None, &opts, &mut rng, 8)
                    .map_err(|e| e.to_string())?;
                let sens = kkt_gradient(prob, &x, &sol, &cls).map_err(|e| e.to_string())?;
                let ball = check_differentiability_on_ball(prob, &x, &sol, &cls, &sens, eps, 1e-3);
                let set = build_subgradient_set(prob, &x, &sol, &ball, 64).map_err(|e| e.to_string())?;
                let (g_lo, g_hi) = hull_1d(&set.gradients);

                let sampled = sample_ball_gradients(prob, &xv, eps, 400, 99 + i as u64)
                    .map_err(|e| e.to_string())?;
                let (s_lo, s_hi) = hull_1d(&sampled);

                let hausdorff = (g_lo - s_lo).abs().max((g_hi - s_hi).abs());
                gaps.push(hausdorff.max(1e-12));
            }
            // Least-squares slope of log(gap) against log(eps).
            let logs: Vec<(f64, f64)> = radii.iter().zip(&gaps).map(|(&e, &g)| (e.ln(), g.ln())).collect();
            let n = logs.len() as f64;
            let mx = logs.iter().map(|(a, _)| a).sum::<f64>() / n;
            let my = logs.iter().map(|(_, b)| b).sum::<f64>() / n;
            let slope = logs.iter().map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
                / logs.iter().map(|(a, _)| (a - mx).powi(2)).sum::<f64>();
            if slope < 0.8 {
                return Err(format!("{label}: log-log slope {slope:.3} < 0.8 (gaps {gaps:?})"));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_5_min_norm_oracle_equivalence() {
    report(5, "min-norm vs simplex brute force", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let grid = 0.025;
        for case in 0..50 {
            let n = rng.gen_range(1..=5);
            let dim = rng.gen_range(1..=4);
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
                return Err(format!(
                    "case {case} (n={n}, dim={dim}): |{:.6} - {:.6}| = {gap:.6} > {}",
                    fast.point.norm(),
                    brute.norm(),
                    2.0 * grid
                ));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_6_algorithm_convergence() {
    report(6, "convergence behavior on Example 1", Duration::from_secs(10), || {
        let prob = make_example1();
        let cfg = GamConfig::default();
        let result = run(&prob, &DVec::from_vec(vec![2.0]), &cfg).map_err(|e| e.to_string())?;
        if !result.converged {
            return Err("run did not converge".into());
        }
        if result.g_norm > 1e-4 || result.eps > 1e-4 {
            return Err(format!("final g_norm {:.3e}, eps {:.3e}", result.g_norm, result.eps));
        }
        if result.phi.abs() > 1e-3 {
            return Err(format!("final phi {:.3e}, want within 1e-3 of 0", result.phi));
        }
        for pair in result.trace.windows(2) {
            let (now, next) = (&pair[0], &pair[1]);
            if next.eps > now.eps || next.nu > now.nu {
                return Err(format!("eps/nu increased at k = {}", next.k));
            }
            if now.branch != Branch::NullStep && now.t > 0.0 {
                // The Armijo inequality exactly as the line search logged it.
                let bound = now.phi - cfg.beta * now.t * now.g_norm * now.g_norm;
                if !(next.phi < bound) {
                    return Err(format!(
                        "k = {}: accepted step violates Armijo ({} !< {bound})",
                        now.k, next.phi
                    ));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_7_cg_matches_dense() {
    report(7, "CG vs dense saddle solves", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dims = [10, 50, 200];
        for case in 0..20 {
            let d_y = dims[case % dims.len()];
            let rows = 1 + case % 4;
            let r = DMat::from_fn(d_y, d_y, |_, _| rng.gen_range(-1.0..1.0));
            let h = &r * r.transpose() + DMat::identity(d_y, d_y);
            let r_y = DMat::from_fn(rows, d_y, |_, _| rng.gen_range(-1.0..1.0));
            let rhs_top = DMat::from_fn(d_y, 2, |_, _| rng.gen_range(-1.0..1.0));
            let r_x = DMat::from_fn(rows, 2, |_, _| rng.gen_range(-1.0..1.0));
            let (dense_top, dense_mult) =
                solve_saddle_block(&h, &r_y, &rhs_top, &r_x, SaddleMethod::Dense).map_err(|e| e.to_string())?;
            let (cg_top, cg_mult) =
                solve_saddle_block(&h, &r_y, &rhs_top, &r_x, SaddleMethod::Cg { tol: 1e-14 })
                    .map_err(|e| e.to_string())?;
            let gap = (&dense_top - &cg_top).amax().max((&dense_mult - &cg_mult).amax());
            if gap > 1e-8 {
                return Err(format!("case {case} (d_y={d_y}, rows={rows}): disagreement {gap:.3e}"));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_8_hypercleaning() {
    report(8, "data hyper-cleaning on the corrupted toy", Duration::from_secs(120), || {
        let (prob, flipped) = make_hyperclean_toy(2);
        let cfg = GamConfig { max_outer_iters: 2000, ..GamConfig::default() };
        let x0 = DVec::zeros(prob.d_x());
        let result = run(&prob, &x0, &cfg).map_err(|e| e.to_string())?;

        // Validation surrogate loss monotone over accepted steps.
        for pair in result.trace.windows(2) {
            let (now, next) = (&pair[0], &pair[1]);
            if now.branch != Branch::NullStep && now.t > 0.0 && !(next.phi < now.phi) {
                return Err(format!("accepted step at k = {} did not reduce the loss", now.k));
            }
        }

        let is_flipped = |i: usize| flipped.contains(&i);
        let penalty = |i: usize| result.x[i].exp();
        let (mut flipped_sum, mut clean_sum, mut clean_count) = (0.0, 0.0, 0usize);
        for i in 0..prob.d_x() {
            if is_flipped(i) {
                flipped_sum += penalty(i);
            } else {
                clean_sum += penalty(i);
                clean_count += 1;
            }
        }
        let flipped_mean = flipped_sum / flipped.len() as f64;
        let clean_mean = clean_sum / clean_count as f64;
        if flipped_mean >= 0.5 * clean_mean {
            return Err(format!(
                "mean penalty on flipped points {flipped_mean:.4} !< 0.5 x clean mean {clean_mean:.4}"
            ));
        }
        Ok(())
    });
}

#[test]
fn criterion_9_out_of_scope_figures() {
    report(9, "real-dataset figures out of desk scale", Duration::from_secs(1), || {
        // The published large-scale experiments (real-dataset hyperparameter
        // sweeps and meta-learning tables) need datasets and compute budgets
        // a desk artifact cannot carry. Criteria 1-8 stand in with
        // property-based checks on seeded synthetic instances; nothing here
        // claims figure-level reproduction.
        Ok(())
    });
}
