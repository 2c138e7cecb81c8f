//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails or exceeds its time budget.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use forge_core::demo::{generate_demoset, rollout, sample_noise, NoiseSequence, NoiseStrategy};
use forge_core::forward::{
    column_radii, solve_forward, solve_forward_with, ForwardMode, ForwardOptions, ForwardSolution,
};
use forge_core::inverse::{
    build_kkt_program, cell_meets_region, classify_grid, infer_theta, recover_policy, run_noise_sweep, witness_pool,
    GridSpec, KktOptions, SweepOptions, Verdict,
};
use forge_core::io::load_problem;
use forge_core::linalg::{Mat, Vector};
use forge_core::model::{
    build_block_operators, double_integrator, CostKind, CostSpec, KnownConstraints, LtvSystem, NoiseModel,
    NonlinearSystem, OutputKind, ParametricFamily, ProblemInstance, System, Unicycle,
};
use forge_core::opt::{solve_milp, solve_qp, MathProgram, SolverSettings, Status};
use forge_core::sls::{k_from_phi, noise_map, phi_from_k, verify_response, FeedbackGain};
use rand::Rng;

type Outcome = Result<String, String>;

/// Name, check and time budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn problem(name: &str) -> ProblemInstance {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/problems")
        .join(name);
    load_problem(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn random_causal_gain(r: &mut impl Rng, ni: usize, no: usize, tt: usize, scale: f64) -> FeedbackGain {
    let m = Mat::from_fn(ni * tt, no * tt, |i, j| {
        if j / no <= i / ni {
            scale * r.gen_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    FeedbackGain::new(m, ni, no, tt).unwrap()
}

fn random_system(r: &mut rand_chacha::ChaCha8Rng, n: usize, ni: usize, no: usize, tt: usize) -> LtvSystem {
    let a = (0..tt).map(|_| rand_mat(r, n, n) * 0.6).collect();
    let b = (0..tt).map(|_| rand_mat(r, n, ni)).collect();
    let c = (0..=tt).map(|_| rand_mat(r, no, n)).collect();
    LtvSystem::new(a, b, c, rand_vec(r, n)).unwrap()
}

fn sls_round_trip() -> Outcome {
    let mut r = rng(101);
    let (mut worst_k, mut worst_res) = (0.0_f64, 0.0_f64);
    for case in 0..100 {
        let (n, ni, no, tt) = (
            r.gen_range(1..=4),
            r.gen_range(1..=4),
            r.gen_range(1..=4),
            r.gen_range(1..=8),
        );
        let sys = random_system(&mut r, n, ni, no, tt);
        let ops = build_block_operators(&sys).map_err(|e| e.to_string())?;
        let k = random_causal_gain(&mut r, ni, no, tt, 0.5);
        let phi = phi_from_k(&k, &ops).map_err(|e| e.to_string())?;
        let back = k_from_phi(&phi, &ops.dims).map_err(|e| e.to_string())?;
        let rel = (&back.matrix - &k.matrix).norm() / k.matrix.norm().max(f64::MIN_POSITIVE);
        let rep = verify_response(&phi, &ops, 1e-9);
        worst_k = worst_k.max(rel);
        worst_res = worst_res.max(rep.controllability.max(rep.observability).max(rep.upper_block));
        if rel > 1e-9 || !rep.pass {
            return Err(format!(
                "case {case} (n={n}, ni={ni}, no={no}, T={tt}): relative {rel:.2e}, residuals {rep:?}"
            ));
        }
    }
    Ok(format!(
        "100 instances, max relative K error {worst_k:.1e}, max residual {worst_res:.1e}"
    ))
}

fn closed_loop_identity() -> Outcome {
    let mut r = rng(102);
    let mut worst = 0.0_f64;
    for case in 0..50 {
        let (n, ni, no, tt) = (
            r.gen_range(1..=4),
            r.gen_range(1..=3),
            r.gen_range(1..=4),
            r.gen_range(1..=8),
        );
        let sys = random_system(&mut r, n, ni, no, tt);
        let ops = build_block_operators(&sys).map_err(|e| e.to_string())?;
        let k = random_causal_gain(&mut r, ni, no, tt, 0.5);
        let phi = phi_from_k(&k, &ops).map_err(|e| e.to_string())?;
        let map = noise_map(&phi, &ops);
        let system = System::Ltv(sys.clone());
        let v = rand_vec(&mut r, ni * tt);
        let z = system.as_nonlinear().simulate(&v);
        let nm = NoiseModel {
            w_radius: 0.3,
            e_radius: 0.2,
            x0_radius: 0.1,
        };
        let ns = sample_noise(&nm, &ops.dims, NoiseStrategy::UniformBall, &mut r);
        let pred = &map.matrix * map.stack_noise(&ns.x0, &ns.w, &ns.e[..tt]);
        // Route 1: the demonstration engine.
        let demo = rollout(&system, &z, &v, &k, &ns).map_err(|e| e.to_string())?;
        let x = demo.x.ok_or("rollout without states")?;
        let mut dev = Vector::zeros(ops.dims.stacked_len());
        dev.rows_mut(0, z.len()).copy_from(&(x - &z));
        dev.rows_mut(z.len(), v.len()).copy_from(&(&demo.u - &v));
        // Route 2: a direct recursion written independently of both.
        let direct = closed_loop(&sys, &z, &v, &k, &ns.x0, &ns.w, &ns.e);
        let mut stacked = Vector::zeros(ops.dims.stacked_len());
        stacked.rows_mut(0, z.len()).copy_from(&z);
        stacked.rows_mut(z.len(), v.len()).copy_from(&v);
        let e1 = (&dev - &pred).amax();
        let e2 = (&direct - &stacked - &pred).amax();
        worst = worst.max(e1).max(e2);
        if e1 > 1e-8 || e2 > 1e-8 {
            return Err(format!("case {case}: rollout {e1:.2e}, direct {e2:.2e}"));
        }
    }
    Ok(format!("50 instances, max deviation error {worst:.1e}"))
}

/// Largest amount by which a rollout enters the true obstacle or breaks a known row.
fn violation(inst: &ProblemInstance, out: &Vector) -> f64 {
    let d = inst.dims();
    let th = inst.theta_star.as_ref().unwrap().as_slice();
    let mut worst = f64::NEG_INFINITY;
    for h in &inst.known.halfspaces {
        worst = worst.max(h.a.dot(out) - h.b);
    }
    for obs in &inst.unknown.obstacles {
        for &t in &obs.times {
            let p: Vec<f64> = inst
                .unknown
                .position_indices
                .iter()
                .map(|&i| out[d.x_index(t, i)])
                .collect();
            // Depth inside the obstacle: smallest face slack, positive when inside.
            let depth = obs
                .faces
                .iter()
                .map(|f| f.normal.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() - f.offset.eval(th))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(depth);
        }
    }
    worst
}

fn robust_feasibility() -> Outcome {
    let inst = di_box_instance(6, NoiseModel::new(0.05, 0.02), [0.6, 1.2, -0.5, 0.2], j3());
    let d = inst.dims();
    let sol = solve_forward(&inst, &ForwardMode::Joint).map_err(|e| e.to_string())?;
    let sys = inst.system.as_ltv().unwrap().clone();
    let radii = column_radii(&d, &inst.noise);
    let mut r = rng(103);
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    let mut run = |nv: &Vector| {
        let (dx0, w, e) = split_noise(nv, d.n, d.no, d.horizon);
        let out = closed_loop(&sys, &sol.z, &sol.v, &sol.gain, &dx0, &w, &e);
        worst = worst.max(violation(&inst, &out));
        count += 1;
    };
    for s in 0..1000 {
        let vertex = s % 2 == 1;
        let nv = Vector::from_fn(d.noise_len(), |j, _| match (radii[j] > 0.0, vertex) {
            (false, _) => 0.0,
            (true, false) => r.gen_range(-radii[j]..=radii[j]),
            (true, true) => {
                if r.gen_bool(0.5) {
                    radii[j]
                } else {
                    -radii[j]
                }
            }
        });
        run(&nv);
    }
    // Per enforced row, the sign-matched vertex maximizes the row over all vertices.
    let ops = build_block_operators(&sys).map_err(|e| e.to_string())?;
    let map = noise_map(&sol.phi, &ops);
    let mut rows: Vec<Vector> = inst.known.halfspaces.iter().map(|h| h.a.clone()).collect();
    let conj = inst.unknown.conjuncts(&d);
    rows.extend(conj.iter().zip(&sol.assignment).map(|(c, &b)| c.disjuncts[b].a.clone()));
    for a in &rows {
        let g = map.matrix.tr_mul(a);
        run(&Vector::from_fn(d.noise_len(), |j, _| radii[j] * g[j].signum()));
        run(&Vector::from_fn(d.noise_len(), |j, _| -radii[j] * g[j].signum()));
    }
    // Worst-vertex rollouts sit exactly on a touched face.
    if worst > 1e-9 {
        return Err(format!("violation {worst:.2e} over {count} rollouts"));
    }
    Ok(format!(
        "{count} rollouts ({} worst-vertex), max depth {worst:.1e}",
        2 * rows.len()
    ))
}

fn j3() -> CostSpec {
    CostSpec::new(CostKind::J3, vec![0, 1]).with_goal(vec![2.0, 0.0])
}

fn gain_and_nominal_exactness() -> Outcome {
    let noise = NoiseModel {
        w_radius: 0.05,
        e_radius: 0.0,
        x0_radius: 0.05,
    };
    let inst = di_box_instance(10, noise, [0.6, 1.2, -0.5, 0.2], j3());
    // Four candidate assignments keep the T=10 plan within budget on one core.
    let opts = ForwardOptions {
        max_assignments: 4,
        ..Default::default()
    };
    let sol = solve_forward_with(&inst, &ForwardMode::Joint, &opts).map_err(|e| e.to_string())?;
    let set = generate_demoset(&sol, &inst.system, &inst.noise, 50, NoiseStrategy::UniformBall, 104)
        .map_err(|e| e.to_string())?;
    let pol = recover_policy(&set, &inst.system).map_err(|e| e.to_string())?;
    let rel = (&pol.gain.matrix - &sol.gain.matrix).norm() / (1.0 + sol.gain.matrix.norm());
    let nt = 4 * 10;
    let nominal = (pol.z.rows(0, nt) - sol.z.rows(0, nt))
        .amax()
        .max((&pol.v - &sol.v).amax());
    if rel > 1e-6 || nominal > 1e-6 {
        return Err(format!("gain {rel:.2e}, nominal {nominal:.2e}"));
    }
    Ok(format!(
        "T=10, D=50: relative gain error {rel:.1e}, nominal error {nominal:.1e}"
    ))
}

fn grid_violations(inst: &ProblemInstance, g: &forge_core::inverse::GridClassification) -> Vec<String> {
    let star = inst.theta_star.as_ref().unwrap().as_slice();
    let mut bad = Vec::new();
    for j in 0..g.grid.ny {
        for i in 0..g.grid.nx {
            let cell = g.grid.cell(i, j);
            let open_hit = inst.unknown.obstacles.iter().any(|o| {
                let faces: Vec<_> = o
                    .faces
                    .iter()
                    .map(|f| (f.normal.clone(), f.offset.eval(star) + 1e-9))
                    .collect();
                cell_meets_region(&cell, &faces)
            });
            let corners = [
                [cell[0], cell[2]],
                [cell[1], cell[2]],
                [cell[0], cell[3]],
                [cell[1], cell[3]],
            ];
            let covered = inst
                .unknown
                .obstacles
                .iter()
                .any(|o| corners.iter().all(|c| o.contains(c, star)));
            match g.verdict(i, j) {
                Verdict::GuaranteedSafe if open_hit => bad.push(format!("safe ({i},{j})")),
                Verdict::GuaranteedUnsafe if !covered => bad.push(format!("unsafe ({i},{j})")),
                _ => {}
            }
        }
    }
    bad
}

fn four_face() -> ProblemInstance {
    let tt = 8;
    let sys = double_integrator(
        0.25,
        2,
        tt,
        Vector::from_vec(vec![-0.5, 0.5, 0.0, 0.0]),
        OutputKind::State,
    )
    .unwrap();
    let d = sys.dims();
    let len = d.stacked_len();
    let mut q = Mat::zeros(len, len);
    let mut lin = vec![0.0; len];
    for (t, x, y) in [(2, 0.15, 0.5), (4, 0.5, 0.85), (6, 0.85, 0.5), (8, 0.5, 0.15)] {
        for (i, c) in [(0, x), (1, y)] {
            let k = d.x_index(t, i);
            q[(k, k)] += 20.0;
            lin[k] -= 20.0 * c;
        }
    }
    let mut cost = CostSpec::new(CostKind::Custom, vec![0, 1]);
    cost.custom = Some(forge_core::model::CustomQuadratic { q, lin });
    ProblemInstance {
        system: System::Ltv(sys),
        noise: NoiseModel::new(0.01, 0.0),
        cost,
        known: KnownConstraints::default(),
        unknown: ParametricFamily {
            param_dim: 4,
            param_lower: vec![-3.0; 4],
            param_upper: vec![3.0; 4],
            position_indices: vec![0, 1],
            obstacles: vec![forge_core::model::Obstacle::axis_box(4, 0, vec![2, 4, 6, 8])],
        },
        theta_star: Some(Vector::from_vec(vec![0.0, 1.0, 0.0, 1.0])),
    }
}

fn conservative_sets() -> Outcome {
    let mut summary = Vec::new();
    let cases = [
        (
            "output-feedback box",
            problem("di-box-output.json"),
            [-0.5, 2.5, -1.5, 1.5],
        ),
        ("four-face box", four_face(), [-1.0, 2.0, -1.0, 2.0]),
    ];
    for (name, inst, window) in cases {
        let sol = solve_forward(&inst, &ForwardMode::Joint).map_err(|e| e.to_string())?;
        let set = generate_demoset(&sol, &inst.system, &inst.noise, 100, NoiseStrategy::UniformBall, 105)
            .map_err(|e| e.to_string())?;
        let pol = recover_policy(&set, &inst.system).map_err(|e| e.to_string())?;
        let kkt = build_kkt_program(&pol, &inst, &KktOptions::default()).map_err(|e| e.to_string())?;
        let star = inst.theta_star.as_ref().unwrap();
        let fixed = infer_theta(&kkt.with_theta_fixed(star.as_slice()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if !fixed.is_feasible() {
            return Err(format!("{name}: theta* rejected ({:?})", fixed.status));
        }
        let g = classify_grid(&kkt, &inst.unknown, &GridSpec { window, nx: 50, ny: 50 }).map_err(|e| e.to_string())?;
        let bad = grid_violations(&inst, &g);
        if !bad.is_empty() {
            return Err(format!(
                "{name}: {} cells contradict theta*: {:?}",
                bad.len(),
                &bad[..bad.len().min(5)]
            ));
        }
        summary.push(format!(
            "{name} {}/{}/{} safe/unsafe/unknown",
            g.count(Verdict::GuaranteedSafe),
            g.count(Verdict::GuaranteedUnsafe),
            g.count(Verdict::Unknown)
        ));
    }
    Ok(summary.join("; "))
}

fn identifiability() -> Outcome {
    let inst = problem("di-box-output.json");
    let sol: ForwardSolution = solve_forward(&inst, &ForwardMode::Joint).map_err(|e| e.to_string())?;
    let active = forge_core::inverse::active_components(&inst, &sol, 1e-6).map_err(|e| e.to_string())?;
    if active.len() < 2 {
        return Err(format!("scenario touches only components {active:?}"));
    }
    let star = inst.theta_star.as_ref().unwrap();
    let mut worst = 0.0_f64;
    let mut witnesses = 0;
    for seed in [1, 2, 3] {
        let set = generate_demoset(&sol, &inst.system, &inst.noise, 100, NoiseStrategy::UniformBall, seed)
            .map_err(|e| e.to_string())?;
        let pol = recover_policy(&set, &inst.system).map_err(|e| e.to_string())?;
        let kkt = build_kkt_program(&pol, &inst, &KktOptions::default()).map_err(|e| e.to_string())?;
        // The pool holds a witness plus the extreme points of every component.
        for th in witness_pool(&kkt).map_err(|e| e.to_string())? {
            witnesses += 1;
            for &k in &active {
                worst = worst.max((th[k] - star[k]).abs());
            }
        }
    }
    if worst > 1e-3 {
        return Err(format!("components {active:?} off by {worst:.2e}"));
    }
    Ok(format!(
        "components {active:?} within {worst:.1e} over {witnesses} witnesses"
    ))
}

fn sensitivity() -> Outcome {
    let inst = problem("di-box-sweep.json");
    let sol = solve_forward(&inst, &ForwardMode::Joint).map_err(|e| e.to_string())?;
    let eps = vec![1e-4, 1e-3, 1e-2, 1e-1];
    let opts = SweepOptions {
        epsilons: eps.clone(),
        trials: 20,
        demos: 50,
        infer: false,
        seed: 107,
        ..Default::default()
    };
    let rows = run_noise_sweep(&inst, &sol, &opts).map_err(|e| e.to_string())?;
    for r in &rows {
        let rep = r.report.ok_or("missing report")?;
        if !(rep.holds_k && rep.holds_zv) {
            return Err(format!(
                "eps {} trial {}: |dK| {:.3e} vs {:.3e}, |d(z,v)| {:.3e} vs {:.3e}",
                r.epsilon, r.trial, rep.err_k, rep.bound_k, rep.err_zv, rep.bound_zv
            ));
        }
    }
    let med: Vec<f64> = eps
        .iter()
        .map(|e| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.epsilon == *e).map(|r| r.err_k).collect();
            v.sort_by(f64::total_cmp);
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        })
        .collect();
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = med.iter().map(|m| m.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    if !(0.8..=1.2).contains(&slope) {
        return Err(format!("slope {slope:.3} (medians {med:?})"));
    }
    let shown: Vec<String> = med.iter().map(|m| format!("{m:.2e}")).collect();
    Ok(format!(
        "{} trials, bounds hold; log-log slope {slope:.3}, medians [{}]",
        rows.len(),
        shown.join(", ")
    ))
}

fn solver_oracles() -> Outcome {
    let mut r = rng(108);
    let mut worst = 0.0_f64;
    for case in 0..50 {
        let n = r.gen_range(2..=10);
        let f = rand_vec(&mut r, n);
        // Minimizers are unique only for the strictly convex half; the rest compare objectives.
        let (s, gap) = if case % 2 == 0 {
            // Strictly convex with general rows; b > 0 keeps the origin feasible.
            let m = rand_mat(&mut r, n, n);
            let h = m.transpose() * &m + Mat::identity(n, n) * 0.05;
            let rows = r.gen_range(1..=6);
            let a = rand_mat(&mut r, rows, n);
            let b = Vector::from_fn(rows, |_, _| r.gen_range(0.1..1.0));
            let p = MathProgram::new(n)
                .with_objective(h.clone(), f.clone())
                .with_ineq(a.clone(), b.clone());
            let s = solve_qp(&p, &SolverSettings::default()).map_err(|e| e.to_string())?;
            let gap = (&s.x - dual_projected_gradient(&h, &f, &a, &b, 200_000)).amax();
            (s, gap)
        } else {
            // Rank-deficient Hessian over a box.
            let m = rand_mat(&mut r, n / 2, n);
            let h = m.transpose() * &m;
            let mut p = MathProgram::new(n).with_objective(h.clone(), f.clone());
            p.lower = vec![-1.0; n];
            p.upper = vec![1.0; n];
            let s = solve_qp(&p, &SolverSettings::default()).map_err(|e| e.to_string())?;
            let oracle = box_projected_gradient(&h, &f, &p.lower, &p.upper, 200_000);
            (s.clone(), (p.objective_value(&s.x) - p.objective_value(&oracle)).abs())
        };
        worst = worst.max(gap);
        if s.status != Status::Optimal || gap > 1e-6 {
            return Err(format!("QP case {case} (n={n}): {:?}, gap {gap:.2e}", s.status));
        }
    }
    let mut milps = 0;
    for nb in 1..=12 {
        for k in 0..5 {
            let p = random_milp(&mut r, nb, k % 3, 4 + k, k % 2 == 0);
            let (st, obj) = enumerate_binaries(&p);
            let s = solve_milp(&p, &SolverSettings::default()).map_err(|e| e.to_string())?;
            milps += 1;
            if s.status != st || (st == Status::Optimal && (s.objective - obj).abs() > 1e-6) {
                return Err(format!(
                    "MILP {nb} binaries: {:?} {} vs {st:?} {obj}",
                    s.status, s.objective
                ));
            }
        }
    }
    Ok(format!("50 QPs within {worst:.1e}; {milps} MILPs match enumeration"))
}

fn nonlinear_pathway() -> Outcome {
    let tt = 8;
    let nl = NonlinearSystem::new(
        std::sync::Arc::new(Unicycle { dt: 0.2 }),
        tt,
        vec![Mat::identity(4, 4); tt + 1],
        Vector::from_vec(vec![0.0, 0.0, 0.0, 0.5]),
    )
    .map_err(|e| e.to_string())?;
    let system = System::Nonlinear(nl.clone());
    let d = system.dims();
    let v = Vector::from_fn(d.ni * tt, |i, _| if i % 2 == 0 { 0.3 } else { 0.1 });
    let z = nl.simulate(&v);
    // Heading corrects lateral error, acceleration corrects speed.
    let block = Mat::from_row_slice(2, 4, &[0.0, -0.5, -0.5, 0.0, -0.3, 0.0, 0.0, -0.8]);
    let k = FeedbackGain::static_block(&block, tt);
    let noise = NoiseModel {
        w_radius: 1e-3,
        e_radius: 1e-3,
        x0_radius: 0.0,
    };
    let mut r = rng(109);
    let demos = (0..100)
        .map(|_| {
            let ns: NoiseSequence = sample_noise(&noise, &d, NoiseStrategy::UniformBall, &mut r);
            rollout(&system, &z, &v, &k, &ns)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let set = forge_core::demo::DemoSet {
        demos,
        corrupted: false,
        epsilon: 0.0,
        rng_seed: 109,
        strategy: NoiseStrategy::UniformBall,
        solution_hash: String::new(),
        clean: None,
    };
    let pol = recover_policy(&set, &system).map_err(|e| e.to_string())?;
    let err = (&pol.z - &z).amax().max((&pol.v - &v).amax());
    if pol.nonlinear_residual > 1e-6 || err > 1e-3 {
        return Err(format!(
            "fit residual {:.2e}, nominal error {err:.2e}",
            pol.nonlinear_residual
        ));
    }
    Ok(format!(
        "unicycle T={tt}: fit residual {:.1e}, nominal error {err:.1e}",
        pol.nonlinear_residual
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("SLS round-trip", sls_round_trip, 10),
        ("closed-loop identity", closed_loop_identity, 5),
        ("robust feasibility", robust_feasibility, 60),
        ("gain and nominal exactness", gain_and_nominal_exactness, 30),
        ("conservative safe/unsafe sets", conservative_sets, 600),
        ("two-face identifiability", identifiability, 120),
        ("transmission-error sensitivity", sensitivity, 300),
        ("solver oracles", solver_oracles, 120),
        ("nonlinear regression", nonlinear_pathway, 120),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let over = took > Duration::from_secs(*budget);
        match (&result, over) {
            (Ok(detail), false) => println!("PASS {}. {name} ({:.1}s): {detail}", i + 1, took.as_secs_f64()),
            (Ok(detail), true) => {
                failed += 1;
                println!(
                    "FAIL {}. {name}: {:.1}s exceeds {budget}s ({detail})",
                    i + 1,
                    took.as_secs_f64()
                );
            }
            (Err(e), _) => {
                failed += 1;
                println!("FAIL {}. {name} ({:.1}s): {e}", i + 1, took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
