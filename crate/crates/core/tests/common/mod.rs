//! Independent reference routines shared by the integration tests.
#![allow(dead_code)]

use forge_core::linalg::{Mat, Vector};
use forge_core::opt::{solve_qp, MathProgram, Objective, SolverSettings, Status};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| r.gen_range(-1.0..1.0))
}

/// Accelerated projected gradient on the dual of
/// `min 1/2 x'Hx + f'x s.t. A x <= b` for positive definite `H`.
pub fn dual_projected_gradient(h: &Mat, f: &Vector, a: &Mat, b: &Vector, iters: usize) -> Vector {
    let hinv = h.clone().try_inverse().expect("positive definite");
    let m = a.nrows();
    // Dual gradient is A x(y) - b with x(y) = -H^{-1}(f + A'y) = q0 - Q y.
    let q = a * &hinv * a.transpose();
    let q0 = -(a * &hinv * f) - b;
    let lip = q.clone().symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / lip;
    let mut lam = Vector::zeros(m);
    let mut y = lam.clone();
    let mut tk = 1.0_f64;
    for _ in 0..iters {
        let g = &q0 - &q * &y;
        let next = (&y + g * step).map(|v| v.max(0.0));
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let moved = (&next - &lam).amax();
        y = &next + (&next - &lam) * ((tk - 1.0) / tn);
        lam = next;
        tk = tn;
        if moved < 1e-15 {
            break;
        }
    }
    -&hinv * (f + a.transpose() * &lam)
}

/// Projected gradient over a box for any PSD `H`.
pub fn box_projected_gradient(h: &Mat, f: &Vector, lo: &[f64], hi: &[f64], iters: usize) -> Vector {
    let lip = h.clone().symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / lip;
    let n = f.len();
    let proj = |v: Vector| Vector::from_fn(n, |i, _| v[i].clamp(lo[i], hi[i]));
    let mut x = proj(Vector::zeros(n));
    let mut y = x.clone();
    let mut tk = 1.0_f64;
    for _ in 0..iters {
        let g = h * &y + f;
        let next = proj(&y - g * step);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        y = &next + (&next - &x) * ((tk - 1.0) / tn);
        x = next;
        tk = tn;
        // Stop on the fixed-point residual at x; a stalled momentum step is not optimality.
        if (proj(&x - (h * &x + f) * step) - &x).amax() < 1e-15 {
            break;
        }
    }
    x
}

/// Status and best objective over every binary pattern, each solved as a
/// continuous problem with the binaries fixed.
pub fn enumerate_binaries(prog: &MathProgram) -> (Status, f64) {
    let nb = prog.binaries.len();
    let mut best: Option<f64> = None;
    for mask in 0..(1u32 << nb) {
        let mut p = prog.clone();
        for (k, &b) in prog.binaries.iter().enumerate() {
            let v = ((mask >> k) & 1) as f64;
            p.lower[b] = v;
            p.upper[b] = v;
        }
        p.binaries.clear();
        if matches!(p.objective, Objective::Feasibility) {
            let n = p.num_vars;
            p.objective = Objective::Quadratic {
                h: Mat::zeros(n, n),
                f: Vector::zeros(n),
            };
        }
        let s = solve_qp(&p, &SolverSettings::default()).expect("pattern solve");
        if s.status == Status::Optimal {
            best = Some(best.map_or(s.objective, |b: f64| b.min(s.objective)));
        }
    }
    match best {
        Some(v) => (Status::Optimal, v),
        None => (Status::Infeasible, f64::NAN),
    }
}

/// Random mixed-binary program: `nb` binaries then `nc` bounded continuous variables.
pub fn random_milp(r: &mut ChaCha8Rng, nb: usize, nc: usize, rows: usize, linear_objective: bool) -> MathProgram {
    let n = nb + nc;
    let mut p = MathProgram::new(n);
    for j in 0..nb {
        p.set_binary(j);
    }
    for j in nb..n {
        p.lower[j] = -2.0;
        p.upper[j] = 2.0;
    }
    for _ in 0..rows {
        let row: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        // Right-hand side near the row's value at a random binary point keeps
        // a mix of feasible and infeasible instances.
        let probe: f64 = row
            .iter()
            .take(nb)
            .map(|a| if r.gen_bool(0.5) { *a } else { 0.0 })
            .sum();
        p.push_ineq(&row, probe + r.gen_range(-0.3..0.4));
    }
    if linear_objective {
        let f = rand_vec(r, n);
        p.objective = Objective::Quadratic { h: Mat::zeros(n, n), f };
    }
    p
}

use forge_core::model::{
    double_integrator, CostKind, CostSpec, CustomQuadratic, KnownConstraints, LtvSystem, NoiseModel, Obstacle,
    OutputKind, ParametricFamily, ProblemInstance, System,
};
use forge_core::sls::FeedbackGain;

/// Planar double integrator (dt 0.25, full-state output) with one axis box
/// `theta = (x_lo, x_hi, y_lo, y_hi)` active at `t = 1..=T`.
pub fn di_box_instance(horizon: usize, noise: NoiseModel, theta: [f64; 4], cost: CostSpec) -> ProblemInstance {
    let sys = double_integrator(0.25, 2, horizon, Vector::zeros(4), OutputKind::State).unwrap();
    let unknown = ParametricFamily {
        param_dim: 4,
        param_lower: vec![-5.0; 4],
        param_upper: vec![5.0; 4],
        position_indices: vec![0, 1],
        obstacles: vec![Obstacle::axis_box(4, 0, (1..=horizon).collect())],
    };
    ProblemInstance {
        system: System::Ltv(sys),
        noise,
        cost,
        known: KnownConstraints::default(),
        unknown,
        theta_star: Some(Vector::from_column_slice(&theta)),
    }
}

/// Direct closed-loop simulation: `x_{t+1} = A x + B u + w_t`, `y_t = C x + e_t`,
/// `u_t = v_t + sum_{tau <= t} K_{t,tau} (y_tau - C z_tau)`. Returns stacked `(x, u)`.
pub fn closed_loop(
    sys: &LtvSystem,
    z: &Vector,
    v: &Vector,
    k: &FeedbackGain,
    dx0: &Vector,
    w: &[Vector],
    e: &[Vector],
) -> Vector {
    let (n, ni, tt) = (sys.state_dim, sys.input_dim, sys.horizon);
    let mut out = Vector::zeros(n * (tt + 1) + ni * tt);
    let mut x = &sys.x0 + dx0;
    let mut innov: Vec<Vector> = Vec::new();
    for t in 0..tt {
        out.rows_mut(t * n, n).copy_from(&x);
        let zt = z.rows(t * n, n).into_owned();
        innov.push(&sys.c[t] * (&x - &zt) + &e[t]);
        let mut u = v.rows(t * ni, ni).into_owned();
        for (tau, d) in innov.iter().enumerate() {
            u += k.block(t, tau) * d;
        }
        out.rows_mut(n * (tt + 1) + t * ni, ni).copy_from(&u);
        x = &sys.a[t] * &x + &sys.b[t] * &u + &w[t];
    }
    out.rows_mut(tt * n, n).copy_from(&x);
    out
}

/// Splits a stacked noise vector `(dx0, w_0.., e_0..)` into its parts.
pub fn split_noise(nv: &Vector, n: usize, no: usize, tt: usize) -> (Vector, Vec<Vector>, Vec<Vector>) {
    let dx0 = nv.rows(0, n).into_owned();
    let w = (0..tt).map(|t| nv.rows(n + t * n, n).into_owned()).collect();
    let e = (0..tt).map(|t| nv.rows(n + n * tt + t * no, no).into_owned()).collect();
    (dx0, w, e)
}

/// Box `(0.6, 1.2, -0.5, 0.2)` between the origin and a goal at `(2, 0)`;
/// the T=6 plan rests on the right and top faces.
pub fn two_face_instance() -> ProblemInstance {
    let mut inst = di_box_instance(
        6,
        NoiseModel::new(0.05, 0.02),
        [0.6, 1.2, -0.5, 0.2],
        CostSpec::new(CostKind::J3, vec![0, 1]).with_goal(vec![2.0, 0.0]),
    );
    inst.unknown.param_lower = vec![-3.0; 4];
    inst.unknown.param_upper = vec![3.0; 4];
    inst
}

/// Unit box with targets just inside each face at t = 2, 4, 6, 8, so the plan
/// touches all four faces.
pub fn four_face_instance() -> ProblemInstance {
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
    cost.custom = Some(CustomQuadratic { q, lin });
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
            obstacles: vec![Obstacle::axis_box(4, 0, vec![2, 4, 6, 8])],
        },
        theta_star: Some(Vector::from_vec(vec![0.0, 1.0, 0.0, 1.0])),
    }
}
