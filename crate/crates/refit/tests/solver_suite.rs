//! Solver behavior: bit-level biased-chain checks, fixed-point identities,
//! sequential refitting and the Bregman boost.

use refit::field::{BlockField, ImageGrid};
use refit::penalties::{ball_project, cos_angle, BlockPenaltyKind, PenaltyTag};
use refit::problems::{add_gaussian_noise, build_scene, ProblemSpec, SceneName};
use refit::rng::CounterRng;
use refit::solvers::{
    dr_joint_solve, ib_boost, pd_joint_solve, posterior_refit, DrParams, PdParams, SupportMask,
};
use refit::verify;

fn crop(src: &ImageGrid, oi: usize, oj: usize, s: usize) -> ImageGrid {
    let mut out = ImageGrid::zeros(s, s, 1);
    for i in 0..s {
        for j in 0..s {
            out.values[i * s + j] = src.values[(i + oi) * src.width + j + oj];
        }
    }
    out
}

fn rel_gap(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let num: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / b.norm().max(1e-30)
}

/// Plain biased Chambolle-Pock, written independently of the joint solver:
/// the refitting lines deleted.
fn reference_biased_cp(problem: &ProblemSpec, params: &PdParams, iters: usize) -> ImageGrid {
    let op = &problem.analysis;
    let (h, w, c) = problem.primal_shape();
    let (tau, kappa, theta) = (params.tau, params.kappa, params.theta);
    let lambda = problem.lambda;
    let phi_t_y = problem.adjoint_forward(&problem.y).unwrap();
    let mut x = ImageGrid::zeros(h, w, c);
    let mut v = x.clone();
    let mut xi = BlockField::zeros(op.blocks(), op.block_size());
    for _ in 0..iters {
        let gv = op.forward(&v).unwrap();
        let mut nu = BlockField::zeros(op.blocks(), op.block_size());
        for ((n, x0), g) in nu.values.iter_mut().zip(&xi.values).zip(&gv.values) {
            *n = x0 + kappa * g;
        }
        xi = ball_project(&nu, lambda);
        let gt = op.adjoint(&xi).unwrap();
        let mut wb = ImageGrid::zeros(h, w, c);
        for ((wv, x0), (p, g)) in wb.values.iter_mut().zip(&x.values).zip(phi_t_y.values.iter().zip(&gt.values)) {
            *wv = x0 + tau * (p - g);
        }
        let xn = problem.resolvent_forward(tau, &wb).unwrap();
        for ((vv, n), o) in v.values.iter_mut().zip(&xn.values).zip(&x.values) {
            *vv = n + theta * (n - o);
        }
        x = xn;
    }
    x
}

#[test]
fn biased_chain_matches_reference_bit_for_bit() {
    let mut rng = CounterRng::new(14);
    let mut y = ImageGrid::zeros(12, 10, 1);
    for v in y.values.iter_mut() {
        *v = 100.0 + 35.0 * rng.next_normal();
    }
    let problem = ProblemSpec::denoise_gray(y, 15.0).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    for iters in 1..=25 {
        let params = PdParams::defaults_for(&problem).with_iters(iters);
        let joint = pd_joint_solve(&problem, &kind, &params, None).unwrap();
        let reference = reference_biased_cp(&problem, &params, iters);
        for (a, b) in joint.x_hat.values.iter().zip(&reference.values) {
            assert_eq!(a.to_bits(), b.to_bits(), "biased iterate diverged from reference at iteration {iters}");
        }
    }
}

#[test]
fn biased_chain_is_independent_of_the_penalty() {
    let scene = crop(&build_scene(SceneName::Shapes128), 40, 40, 32);
    let y = add_gaussian_noise(&scene, 25.0, 3);
    let problem = ProblemSpec::denoise_gray(y, 60.0).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(120);
    let baseline = pd_joint_solve(&problem, &BlockPenaltyKind::new(PenaltyTag::Sd, 60.0).unwrap(), &params, None).unwrap();
    for tag in PenaltyTag::ALL {
        let out = pd_joint_solve(&problem, &BlockPenaltyKind::new(tag, 60.0).unwrap(), &params, None).unwrap();
        for (a, b) in out.x_hat.values.iter().zip(&baseline.x_hat.values) {
            assert_eq!(a.to_bits(), b.to_bits(), "{tag} changed the biased chain");
        }
        for (ra, rb) in out.trace.iter().zip(&baseline.trace) {
            assert_eq!(ra.fidelity_biased.to_bits(), rb.fidelity_biased.to_bits());
            assert_eq!(ra.objective_biased.to_bits(), rb.objective_biased.to_bits());
        }
    }
}

#[test]
fn deterministic_replay_reproduces_traces() {
    let scene = crop(&build_scene(SceneName::Shapes128), 50, 20, 24);
    let y = add_gaussian_noise(&scene, 30.0, 8);
    let problem = ProblemSpec::denoise_gray(y, 45.0).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Qd, problem.lambda).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(200);
    let a = pd_joint_solve(&problem, &kind, &params, Some(&scene)).unwrap();
    let b = pd_joint_solve(&problem, &kind, &params, Some(&scene)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.x_tilde.values, b.x_tilde.values);

    let dr_params = DrParams::defaults_for(&problem).with_iters(60);
    let da = dr_joint_solve(&problem, &kind, &dr_params, None).unwrap();
    let db = dr_joint_solve(&problem, &kind, &dr_params, None).unwrap();
    assert_eq!(da.trace, db.trace);
}

#[test]
fn solvers_smoke_suite_is_green() {
    // lambda -> 0 data recovery, constant-image fixed point, and the
    // fidelity contract on a small instance.
    let suite = verify::solvers_suite(0).unwrap();
    for c in &suite.checks {
        assert!(c.passed, "{}: {}", c.label, c.detail);
    }
}

#[test]
fn dr_lambda_to_zero_recovers_data() {
    let mut rng = CounterRng::new(5);
    let mut y = ImageGrid::zeros(16, 16, 1);
    for v in y.values.iter_mut() {
        *v = 120.0 + 30.0 * rng.next_normal();
    }
    let problem = ProblemSpec::denoise_gray(y.clone(), 1e-8).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let params = DrParams { alpha: 1.5, tau: 0.2, beta: 1e-12, iters: 2000 };
    let out = dr_joint_solve(&problem, &kind, &params, None).unwrap();
    assert!(rel_gap(&out.x_hat, &y) <= 1e-4);
    assert!(rel_gap(&out.x_tilde, &y) <= 1e-4);
}

#[test]
fn dr_biased_fixed_point_on_support() {
    // At the fixed point the auxiliary dual is the biased gradient shifted
    // radially by tau*lambda.
    let scene = crop(&build_scene(SceneName::Shapes128), 48, 48, 32);
    let y = add_gaussian_noise(&scene, 10.0, 3);
    let problem = ProblemSpec::denoise_gray(y, 20.0).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let params = DrParams { alpha: 1.5, tau: 0.2, beta: 1e-8 * problem.lambda, iters: 4000 };
    let out = dr_joint_solve(&problem, &kind, &params, None).unwrap();
    let zeta = out.zeta_hat.as_ref().unwrap();
    let gxh = problem.analysis.forward(&out.x_hat).unwrap();
    let tau_lambda = params.tau * problem.lambda;
    let mut checked = 0;
    for i in 0..gxh.blocks {
        if out.mask.contains(i) {
            let n = gxh.block_norm(i);
            if n < 1.0 {
                continue;
            }
            checked += 1;
            let scale = 1.0 + tau_lambda / n;
            let mut err = 0.0;
            for (z, g) in zeta.block(i).iter().zip(gxh.block(i)) {
                let d = z - scale * g;
                err += d * d;
            }
            let rel = err.sqrt() / zeta.block_norm(i);
            assert!(rel <= 1e-4, "block {i}: fixed-point relative error {rel}");
        }
    }
    assert!(checked >= 50, "only {checked} support blocks exercised");
}

#[test]
fn posterior_with_oversized_threshold_returns_the_mean() {
    let scene = crop(&build_scene(SceneName::Shapes128), 40, 40, 24);
    let y = add_gaussian_noise(&scene, 20.0, 2);
    let problem = ProblemSpec::denoise_gray(y.clone(), 30.0).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(4000);
    let base = pd_joint_solve(&problem, &kind, &params, None).unwrap();
    let post = posterior_refit(&problem, &kind, &base.x_hat, 1e9, &params, None).unwrap();
    assert_eq!(post.mask.count(), 0);
    let mean: f64 = y.values.iter().sum::<f64>() / y.values.len() as f64;
    for v in &post.x_tilde.values {
        assert!((v - mean).abs() <= 1e-6 * mean.abs(), "x_tilde {v} vs mean {mean}");
    }
}

#[test]
fn posterior_hard_direction_keeps_the_anchor_ray() {
    // Synthetic biased solution with consistent anchor directions: a clean
    // vertical step; the refit must stay on the anchor rays.
    let (h, w) = (10usize, 10usize);
    let mut x_hat = ImageGrid::zeros(h, w, 1);
    for i in 0..h {
        for j in 0..w {
            x_hat.values[i * w + j] = if j < 5 { 80.0 } else { 150.0 };
        }
    }
    let y = add_gaussian_noise(&x_hat, 15.0, 6);
    let problem = ProblemSpec::denoise_gray(y, 40.0).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Hd, problem.lambda).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(4000);
    let post = posterior_refit(&problem, &kind, &x_hat, 1.0, &params, None).unwrap();
    let gxh = problem.analysis.forward(&x_hat).unwrap();
    let gxt = problem.analysis.forward(&post.x_tilde).unwrap();
    let mut checked = 0;
    for i in 0..gxh.blocks {
        if post.mask.contains(i) && gxt.block_norm(i) > 1e-3 {
            checked += 1;
            let c = cos_angle(gxt.block(i), gxh.block(i));
            assert!(c >= 1.0 - 1e-6, "block {i}: cos {c}");
        }
    }
    assert!(checked >= 5, "only {checked} blocks exercised");
}

#[test]
fn posterior_joint_agree_when_biased_is_accurate() {
    let scene = crop(&build_scene(SceneName::Shapes128), 30, 30, 64);
    let y = add_gaussian_noise(&scene, 30.0, 4);
    let problem = ProblemSpec::denoise_gray(y, 150.0).unwrap();
    let s = 1.0 / (problem.analysis.op_norm() * 1.001);
    let params = PdParams { tau: s / 32.0, kappa: s * 32.0, theta: 1.0, beta: 1e-3 * problem.lambda, iters: 10_000 };
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let joint = pd_joint_solve(&problem, &kind, &params, Some(&scene)).unwrap();
    // Same amplitude cutoff for the primal-based rule: beta_pd / kappa.
    let post = posterior_refit(&problem, &kind, &joint.x_hat, params.beta / params.kappa, &params, Some(&scene)).unwrap();
    let pj = problem.psnr_against(&scene, &joint.x_tilde);
    let pp = problem.psnr_against(&scene, &post.x_tilde);
    assert!((pj - pp).abs() <= 0.3, "joint {pj:.3} dB vs posterior {pp:.3} dB");
}

#[test]
fn posterior_supports_are_preserved_at_convergence() {
    let scene = crop(&build_scene(SceneName::Shapes128), 30, 30, 64);
    let y = add_gaussian_noise(&scene, 30.0, 4);
    let problem = ProblemSpec::denoise_gray(y, 150.0).unwrap();
    let s = 1.0 / (problem.analysis.op_norm() * 1.001);
    let params = PdParams { tau: s / 32.0, kappa: s * 32.0, theta: 1.0, beta: 1e-3 * problem.lambda, iters: 10_000 };
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let base = pd_joint_solve(&problem, &kind, &params, None).unwrap();
    let post = posterior_refit(&problem, &kind, &base.x_hat, 0.5, &params, None).unwrap();
    let gx = problem.analysis.forward(&post.x_tilde).unwrap();
    let mut max_off = 0.0f64;
    let mut max_all = 0.0f64;
    for i in 0..gx.blocks {
        let n = gx.block_norm(i);
        max_all = max_all.max(n);
        if !post.mask.contains(i) {
            max_off = max_off.max(n);
        }
    }
    assert!(max_off <= 1e-4 * max_all, "off-support ratio {}", max_off / max_all);
}

#[test]
fn ib_boost_from_zero_equals_the_biased_solution() {
    let mut scene = ImageGrid::zeros(12, 12, 1);
    scene.values.fill(50.0);
    for i in 0..12 {
        for j in 6..12 {
            scene.values[i * 12 + j] = 200.0;
        }
    }
    let problem = ProblemSpec::denoise_gray(scene.clone(), 30.0).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(4000);
    let empty = SupportMask::empty(problem.analysis.blocks());
    let x0 = ImageGrid::zeros(12, 12, 1);
    let boosted = ib_boost(&problem, &x0, &empty, &params).unwrap();
    let biased = pd_joint_solve(
        &problem,
        &BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap(),
        &params,
        None,
    )
    .unwrap()
    .x_hat;
    assert!(rel_gap(&boosted, &biased) <= 1e-10, "gap {}", rel_gap(&boosted, &biased));
}

#[test]
fn ib_boost_improves_fidelity_and_can_grow_the_support() {
    let mut scene = ImageGrid::zeros(12, 12, 1);
    scene.values.fill(50.0);
    for i in 0..12 {
        for j in 6..12 {
            scene.values[i * 12 + j] = 200.0;
        }
    }
    let problem = ProblemSpec::denoise_gray(scene, 30.0).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(4000);

    // Boosting from a converged biased solution: fidelity improves.
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let biased = pd_joint_solve(&problem, &kind, &params, None).unwrap();
    let boosted = ib_boost(&problem, &biased.x_hat, &biased.mask, &params).unwrap();
    let fid_in = problem.fidelity(&biased.x_hat).unwrap();
    let fid_out = problem.fidelity(&boosted).unwrap();
    assert!(2.0 * fid_out <= 2.0 * fid_in + 1e-6, "boost fidelity {fid_out} vs input {fid_in}");

    // A mask hiding the edge: boosting re-activates it, refitting keeps it
    // dead.
    let empty = SupportMask::empty(problem.analysis.blocks());
    let x0 = ImageGrid::zeros(12, 12, 1);
    let boosted = ib_boost(&problem, &x0, &empty, &params).unwrap();
    let gb = problem.analysis.forward(&boosted).unwrap();
    let activated = (0..gb.blocks).filter(|&i| gb.block_norm(i) > 1.0).count();
    assert!(activated > 0, "boost failed to activate off-mask blocks");
    let post = posterior_refit(&problem, &kind, &x0, 1e9, &params, None).unwrap();
    let gp = problem.analysis.forward(&post.x_tilde).unwrap();
    let active_post = (0..gp.blocks).filter(|&i| gp.block_norm(i) > 1.0).count();
    assert_eq!(active_post, 0, "refitting activated blocks outside the mask");
}

#[test]
fn overflowing_objective_aborts_with_the_iteration_index() {
    // Data large enough that the squared residual overflows f64: the
    // divergence detector must report the iteration it tripped on.
    let y = ImageGrid::from_values(4, 4, 1, vec![1e200; 16]).unwrap();
    let problem = ProblemSpec::denoise_gray(y, 10.0).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(5);
    match pd_joint_solve(&problem, &kind, &params, None) {
        Err(refit::RefitError::NonFiniteIterate { iter }) => assert_eq!(iter, 0),
        other => panic!("expected NonFiniteIterate, got {other:?}"),
    }
}

#[test]
fn biased_objective_is_stationary_at_the_end_of_the_run() {
    let scene = crop(&build_scene(SceneName::Shapes128), 30, 30, 64);
    let y = add_gaussian_noise(&scene, 30.0, 4);
    let problem = ProblemSpec::denoise_gray(y, 80.0).unwrap();
    let kind = BlockPenaltyKind::new(PenaltyTag::Sd, problem.lambda).unwrap();
    let params = PdParams::defaults_for(&problem).with_iters(4000);
    let out = pd_joint_solve(&problem, &kind, &params, None).unwrap();
    let objectives: Vec<f64> = out.trace.iter().map(|r| r.objective_biased).collect();
    let min = objectives.iter().cloned().fold(f64::INFINITY, f64::min);
    let tail_mean: f64 = objectives[objectives.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail_mean <= min * (1.0 + 1e-3), "tail mean {tail_mean} vs min {min}");
}
