mod common;

use std::sync::OnceLock;

use forge_core::demo::{generate_demoset, perturb, DemoSet, NoiseStrategy};
use forge_core::forward::{solve_forward, ForwardMode, ForwardSolution};
use forge_core::inverse::{
    active_components, build_kkt_program, infer_theta, recover_policy, run_noise_sweep, sensitivity_bounds,
    stack_differences, sweep_csv, KktOptions, SweepOptions,
};
use forge_core::model::{CostKind, CostSpec, NoiseModel, ProblemInstance};

/// Unit-ball process noise and initial-state uncertainty, exact outputs.
fn sweep_instance() -> &'static (ProblemInstance, ForwardSolution) {
    static S: OnceLock<(ProblemInstance, ForwardSolution)> = OnceLock::new();
    S.get_or_init(|| {
        let noise = NoiseModel {
            w_radius: 1.0,
            e_radius: 0.0,
            x0_radius: 1.0,
        };
        let mut inst = common::di_box_instance(
            6,
            noise,
            [2.0, 4.0, -1.0, 1.0],
            CostSpec::new(CostKind::J3, vec![0, 1]).with_goal(vec![6.0, 0.0]),
        );
        inst.unknown.param_lower = vec![-10.0; 4];
        inst.unknown.param_upper = vec![10.0; 4];
        let sol = solve_forward(&inst, &ForwardMode::Joint).unwrap();
        (inst, sol)
    })
}

fn demos(count: usize, seed: u64) -> DemoSet {
    let (inst, sol) = sweep_instance();
    generate_demoset(sol, &inst.system, &inst.noise, count, NoiseStrategy::UniformBall, seed).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn clean_data_gives_zero_error_and_zero_bound() {
    let (inst, sol) = sweep_instance();
    let set = demos(50, 3);
    let pol = recover_policy(&set, &inst.system).unwrap();
    let rep = sensitivity_bounds(&set, &set, &inst.system, sol, &pol).unwrap();
    assert_eq!(rep.epsilon, 0.0);
    assert_eq!(rep.bound_k, 0.0);
    assert_eq!(rep.bound_zv, 0.0);
    assert!(rep.err_k <= 1e-9, "{}", rep.err_k);
    assert!(rep.err_zv <= 1e-9, "{}", rep.err_zv);
    assert!(rep.holds_k && rep.holds_zv);
}

#[test]
fn rho_constants_match_direct_computation() {
    let (inst, sol) = sweep_instance();
    let set = demos(30, 4);
    let pol = recover_policy(&set, &inst.system).unwrap();
    let rep = sensitivity_bounds(&set, &set, &inst.system, sol, &pol).unwrap();
    let y = stack_differences(&set, &inst.dims()).unwrap().y;
    // Y has full row rank here; Y^+ = Y^T (Y Y^T)^{-1}, and |Y^+| = 1 / sigma_min(Y).
    let gram = &y * y.transpose();
    let lam_min = gram.symmetric_eigenvalues().min();
    let expect = (29.0_f64).sqrt() / lam_min.sqrt();
    assert!((rep.rho1 - expect).abs() <= 1e-8 * expect, "{} vs {expect}", rep.rho1);
    let k = forge_core::linalg::norm2(&sol.gain.matrix);
    assert!((rep.rho4 - rep.gamma_norm * k).abs() <= 1e-12 * rep.rho4);
    assert!((rep.rho3 - 29.0_f64.sqrt() * rep.gamma_norm * rep.y_pinv_norm).abs() <= 1e-10 * rep.rho3);
}

#[test]
fn doubling_demonstration_spread_halves_rho1() {
    let (inst, sol) = sweep_instance();
    let set = demos(20, 5);
    let mut wide = set.clone();
    for (w, d) in wide.demos.iter_mut().zip(&set.demos) {
        w.u = &d.u * 2.0;
        w.y = &d.y * 2.0;
    }
    let pol = recover_policy(&set, &inst.system).unwrap();
    let a = sensitivity_bounds(&set, &set, &inst.system, sol, &pol).unwrap();
    let b = sensitivity_bounds(&wide, &wide, &inst.system, sol, &pol).unwrap();
    assert!((b.rho1 - 0.5 * a.rho1).abs() <= 1e-9 * a.rho1);
}

#[test]
fn measured_epsilon_is_largest_perturbation_norm() {
    let (inst, sol) = sweep_instance();
    let set = demos(10, 6);
    let seen = perturb(&set, 0.01, 9).unwrap();
    let pol = recover_policy(&seen, &inst.system).unwrap();
    let rep = sensitivity_bounds(&set, &seen, &inst.system, sol, &pol).unwrap();
    let ny = 2 * 6 * 2;
    let mut expect = 0.0_f64;
    for (c, t) in set.demos.iter().zip(&seen.demos) {
        let du: f64 = c.u.iter().zip(t.u.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let dy: f64 = (0..ny).map(|i| (c.y[i] - t.y[i]).powi(2)).sum();
        expect = expect.max(du.sqrt()).max(dy.sqrt());
    }
    assert!((rep.epsilon - expect).abs() <= 1e-15);
    // Entrywise jitter of at most 0.01 over 12 inputs.
    assert!(rep.epsilon > 0.0 && rep.epsilon <= 0.01 * (ny as f64).sqrt());
}

#[test]
fn bounds_hold_across_trials() {
    let (inst, sol) = sweep_instance();
    let opts = SweepOptions {
        epsilons: vec![1e-2],
        trials: 20,
        demos: 50,
        infer: false,
        seed: 21,
        ..Default::default()
    };
    let rows = run_noise_sweep(inst, sol, &opts).unwrap();
    assert_eq!(rows.len(), 20);
    for r in &rows {
        let rep = r.report.unwrap();
        assert!(rep.holds_k, "trial {}: {} > {}", r.trial, rep.err_k, rep.bound_k);
        assert!(rep.holds_zv, "trial {}: {} > {}", r.trial, rep.err_zv, rep.bound_zv);
    }
}

#[test]
fn sweep_layout_and_monotone_medians() {
    let (inst, sol) = sweep_instance();
    let eps = vec![0.0, 1e-3, 1e-2, 1e-1];
    let opts = SweepOptions {
        epsilons: eps.clone(),
        trials: 6,
        demos: 30,
        infer: false,
        seed: 5,
        ..Default::default()
    };
    let rows = run_noise_sweep(inst, sol, &opts).unwrap();
    assert_eq!(rows.len(), eps.len() * 6);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.epsilon, eps[k / 6]);
        assert_eq!(r.trial, k % 6);
        assert!(r.err_theta_active.is_nan());
    }
    for r in &rows[..6] {
        assert!(r.err_k <= 1e-9 && r.err_z <= 1e-9 && r.err_v <= 1e-9);
        assert_eq!(r.bound_k, 0.0);
    }
    let med: Vec<f64> = eps
        .iter()
        .map(|e| median(rows.iter().filter(|r| r.epsilon == *e).map(|r| r.err_k).collect()))
        .collect();
    assert!(med.windows(2).all(|w| w[0] <= w[1]), "{med:?}");
    let csv = sweep_csv(&rows).unwrap();
    assert_eq!(csv, sweep_csv(&run_noise_sweep(inst, sol, &opts).unwrap()).unwrap());
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epsilon,trial,err_z,err_v,err_K,err_theta_active,bound_K,bound_zv"
    );
    assert_eq!(lines.count(), rows.len());
}

#[test]
fn sweep_rejects_empty_grid() {
    let (inst, sol) = sweep_instance();
    let opts = SweepOptions {
        epsilons: vec![],
        ..Default::default()
    };
    assert!(run_noise_sweep(inst, sol, &opts).is_err());
    let opts = SweepOptions {
        trials: 0,
        ..Default::default()
    };
    assert!(run_noise_sweep(inst, sol, &opts).is_err());
}

#[test]
fn sweep_with_inference_recovers_touched_faces() {
    let inst = common::two_face_instance();
    let sol = solve_forward(&inst, &ForwardMode::Joint).unwrap();
    assert_eq!(active_components(&inst, &sol, 1e-6).unwrap(), vec![1, 3]);
    let opts = SweepOptions {
        epsilons: vec![0.0, 1e-4],
        trials: 2,
        demos: 40,
        infer: true,
        seed: 8,
        ..Default::default()
    };
    let rows = run_noise_sweep(&inst, &sol, &opts).unwrap();
    for r in &rows {
        assert!(r.err_theta_active.is_finite(), "eps {} trial {}", r.epsilon, r.trial);
    }
    for r in rows.iter().filter(|r| r.epsilon == 0.0) {
        assert!(r.err_theta_active <= 1e-6, "{}", r.err_theta_active);
    }
}

#[test]
fn relaxed_program_absorbs_corruption() {
    let inst = common::two_face_instance();
    let sol = solve_forward(&inst, &ForwardMode::Joint).unwrap();
    let set = generate_demoset(&sol, &inst.system, &inst.noise, 40, NoiseStrategy::UniformBall, 2).unwrap();
    let seen = perturb(&set, 1e-3, 3).unwrap();
    let pol = recover_policy(&seen, &inst.system).unwrap();
    let relaxed = KktOptions {
        relaxed: true,
        ..Default::default()
    };
    let w = infer_theta(&build_kkt_program(&pol, &inst, &relaxed).unwrap()).unwrap();
    assert!(w.is_feasible());
    let star = inst.theta_star.as_ref().unwrap();
    for k in [1, 3] {
        assert!(
            (w.theta[k] - star[k]).abs() <= 0.05,
            "component {k}: {} vs {}",
            w.theta[k],
            star[k]
        );
    }
    // On clean data the relaxation changes nothing on the touched faces.
    let pol = recover_policy(&set, &inst.system).unwrap();
    let w = infer_theta(&build_kkt_program(&pol, &inst, &relaxed).unwrap()).unwrap();
    for k in [1, 3] {
        assert!((w.theta[k] - star[k]).abs() <= 1e-6);
    }
}
