//! Robust trajectory synthesis: nominal plan plus a causal feedback gain whose
//! closed loop keeps every constraint satisfied for all bounded noise.
//!
//! Worst-case constraint values are exact: for `a . (x, u) <= b` with the
//! deviation `M (x0, w, e)` over infinity balls, the tightening margin is
//! `sum_j radius_j |(a^T M)_j|`. The cost is the nominal `J(z, v)`.
//!
//! Joint mode optimizes the response through the free entries of `phi_ue`
//! (see [`ResponseBasis`]), so achievability holds by construction and the
//! program stays a convex QP.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::{serde_vec, Mat, Vector};
use crate::model::{
    build_block_operators, linearize, validate_instance, BlockOperators, Dims, LtvSystem, NoiseModel, ProblemInstance,
    System,
};
use crate::opt::{min_violation, solve_qp, MathProgram, SolverSettings, Status};
use crate::sls::{
    k_from_phi, noise_map, phi_from_k, phi_from_ue, verify_response, FeedbackGain, NoiseMap, ResponseBasis,
    SystemResponse, DEFAULT_RESPONSE_TOL,
};

/// `a . (z, v) <= b - margin` guarantees `a . (x, u) <= b` under all noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenedConstraint {
    #[serde(with = "serde_vec")]
    pub a: Vector,
    pub b: f64,
    pub margin: f64,
}

impl TightenedConstraint {
    pub fn enforced_rhs(&self) -> f64 {
        self.b - self.margin
    }
}

/// Radius of each noise-map column.
pub fn column_radii(d: &Dims, noise: &NoiseModel) -> Vector {
    let mut r = Vector::zeros(d.noise_len());
    for j in 0..d.noise_len() {
        r[j] = if j < d.n {
            noise.x0_radius
        } else if j < d.n + d.n * d.horizon {
            noise.w_radius
        } else {
            noise.e_radius
        };
    }
    r
}

pub fn tighten_halfspace(a: &Vector, b: f64, map: &NoiseMap, noise: &NoiseModel) -> Result<TightenedConstraint> {
    if a.len() != map.matrix.nrows() {
        return Err(dim("halfspace row", map.matrix.nrows(), a.len()));
    }
    let radii = column_radii(&map.dims, noise);
    let row = map.matrix.tr_mul(a);
    let margin = row
        .iter()
        .zip(radii.iter())
        .map(|(c, r)| if *r > 0.0 { r * c.abs() } else { 0.0 })
        .sum();
    Ok(TightenedConstraint {
        a: a.clone(),
        b,
        margin,
    })
}

/// Linear(ized) dynamics `z_{t+1} = A_t z_t + B_t v_t + r_t`.
#[derive(Debug, Clone)]
pub struct AffineModel {
    pub ltv: LtvSystem,
    pub offsets: Vec<Vector>,
}

impl AffineModel {
    pub fn exact(ltv: LtvSystem) -> Self {
        let n = ltv.state_dim;
        let offsets = vec![Vector::zeros(n); ltv.horizon];
        AffineModel { ltv, offsets }
    }

    /// `(P, p0)` with stacked `(z, v) = P v + p0`.
    pub fn rollout_map(&self) -> (Mat, Vector) {
        let d = self.ltv.dims();
        let (n, ni, tt) = (d.n, d.ni, d.horizon);
        let nv = ni * tt;
        let mut p = Mat::zeros(d.stacked_len(), nv);
        let mut p0 = Vector::zeros(d.stacked_len());
        p0.rows_mut(0, n).copy_from(&self.ltv.x0);
        for t in 0..tt {
            let prev = p.rows(t * n, n).into_owned();
            let next = &self.ltv.a[t] * prev;
            p.rows_mut((t + 1) * n, n).copy_from(&next);
            let mut blk = p.view_mut(((t + 1) * n, t * ni), (n, ni));
            blk += &self.ltv.b[t];
            let z0 = p0.rows(t * n, n).into_owned();
            let nz = &self.ltv.a[t] * z0 + &self.offsets[t];
            p0.rows_mut((t + 1) * n, n).copy_from(&nz);
        }
        for j in 0..nv {
            p[(d.u_offset() + j, j)] = 1.0;
        }
        (p, p0)
    }

    /// Equality rows `E p = e` of the nominal dynamics over stacked `p`.
    pub fn dynamics_rows(&self) -> (Mat, Vector) {
        let d = self.ltv.dims();
        let (n, ni, tt) = (d.n, d.ni, d.horizon);
        let mut e = Mat::zeros(n * (tt + 1), d.stacked_len());
        let mut rhs = Vector::zeros(n * (tt + 1));
        for i in 0..n {
            e[(i, i)] = 1.0;
            rhs[i] = self.ltv.x0[i];
        }
        for t in 0..tt {
            let r0 = n * (t + 1);
            for i in 0..n {
                e[(r0 + i, d.x_index(t + 1, i))] = 1.0;
                for k in 0..n {
                    e[(r0 + i, d.x_index(t, k))] -= self.ltv.a[t][(i, k)];
                }
                for j in 0..ni {
                    e[(r0 + i, d.u_index(t, j))] -= self.ltv.b[t][(i, j)];
                }
                rhs[r0 + i] = self.offsets[t][i];
            }
        }
        (e, rhs)
    }
}

/// How the feedback part of the policy is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardMode {
    /// Optimize nominal trajectory and response together.
    Joint,
    /// Use a given response (linear systems only; nonlinear systems convert it to a gain).
    FixedPhi(SystemResponse),
    /// Use a given gain; the response follows from each linearization.
    FixedGain(FeedbackGain),
}

impl ForwardMode {
    pub fn name(&self) -> &'static str {
        match self {
            ForwardMode::Joint => "joint",
            ForwardMode::FixedPhi(_) => "fixed_phi",
            ForwardMode::FixedGain(_) => "fixed_gain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardOptions {
    /// Upper bound on disjunct assignments tried.
    pub max_assignments: usize,
    /// Weight of `|Phi|_F^2` in joint mode.
    pub phi_reg: f64,
    /// Weight of the squared auxiliary bounds on `|a^T M|`.
    pub aux_reg: f64,
    pub sqp_tol: f64,
    pub sqp_max_iter: usize,
    pub solver: SolverSettings,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            max_assignments: 16,
            phi_reg: 1e-6,
            aux_reg: 1e-6,
            sqp_tol: 1e-6,
            sqp_max_iter: 20,
            solver: SolverSettings::default(),
        }
    }
}

/// Chosen disjunct index per conjunct, in `ParametricFamily::conjuncts` order.
pub type Assignment = Vec<usize>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardSolution {
    /// `z_0..z_T` stacked.
    #[serde(with = "serde_vec")]
    pub z: Vector,
    #[serde(with = "serde_vec")]
    pub v: Vector,
    pub phi: SystemResponse,
    pub gain: FeedbackGain,
    pub lambda_known: Vec<f64>,
    /// One multiplier per conjunct, for its chosen disjunct.
    pub lambda_unknown: Vec<f64>,
    /// Multipliers of the dynamics rows `z_0 = x0`, `z_{t+1} - A z_t - B v_t = r_t`.
    pub nu: Vec<f64>,
    pub assignment: Assignment,
    pub margins_known: Vec<f64>,
    pub margins_unknown: Vec<f64>,
    /// Nominal cost `J(z, v)`.
    pub objective: f64,
    /// QP objective including the response and auxiliary regularizers.
    pub regularized_objective: f64,
    pub mode: String,
    /// Dynamics the solution is exact for (the final linearization for nonlinear systems).
    pub model: LtvSystem,
    pub model_offsets: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl ForwardSolution {
    /// Stacked `(z, v)`.
    pub fn stacked(&self) -> Vector {
        Vector::from_iterator(self.z.len() + self.v.len(), self.z.iter().chain(self.v.iter()).copied())
    }

    pub fn affine_model(&self) -> AffineModel {
        AffineModel {
            ltv: self.model.clone(),
            offsets: self
                .model_offsets
                .iter()
                .map(|o| Vector::from_column_slice(o))
                .collect(),
        }
    }
}

/// Constraint rows in solve order: known halfspaces, then one chosen disjunct per conjunct.
fn constraint_rows(inst: &ProblemInstance, assignment: &[usize]) -> Result<Vec<(Vector, f64)>> {
    let d = inst.dims();
    let mut rows: Vec<(Vector, f64)> = inst.known.halfspaces.iter().map(|h| (h.a.clone(), h.b)).collect();
    let conj = inst.unknown.conjuncts(&d);
    if conj.is_empty() {
        return Ok(rows);
    }
    let theta = inst.theta_star.as_ref().ok_or_else(|| {
        Error::Missing("theta_star is required for forward synthesis with unknown constraints".into())
    })?;
    if assignment.len() != conj.len() {
        return Err(dim("disjunct assignment", conj.len(), assignment.len()));
    }
    for (c, &b) in conj.iter().zip(assignment) {
        let row = c
            .disjuncts
            .get(b)
            .ok_or_else(|| Error::Validation(format!("disjunct {b} out of range for obstacle {}", c.obstacle)))?;
        rows.push((row.a.clone(), row.offset.eval(theta.as_slice())));
    }
    Ok(rows)
}

/// Feedback description resolved against one linear model.
enum Feedback<'a> {
    Joint(&'a ResponseBasis),
    Fixed(SystemResponse),
}

struct Reduced {
    prog: MathProgram,
    nv: usize,
    nq: usize,
}

fn build_reduced(
    inst: &ProblemInstance,
    model: &AffineModel,
    ops: &BlockOperators,
    feedback: &Feedback,
    rows: &[(Vector, f64)],
    opts: &ForwardOptions,
) -> Result<Reduced> {
    let d = ops.dims;
    let cost = inst.cost.quadratic(&d)?;
    let (p, p0) = model.rollout_map();
    let nv = d.ni * d.horizon;
    let radii = column_radii(&d, &inst.noise);
    let m = rows.len();
    let mut a_rows = Mat::zeros(m, d.stacked_len());
    for (i, (a, _)) in rows.iter().enumerate() {
        a_rows.set_row(i, &a.transpose());
    }
    let (nq, base, grads) = match feedback {
        Feedback::Joint(basis) => {
            let nq = basis.entries.len();
            let grads: Vec<Mat> = basis.map_basis.iter().map(|mk| &a_rows * mk).collect();
            (nq, &a_rows * &basis.map0, grads)
        }
        Feedback::Fixed(phi) => (0, &a_rows * noise_map(phi, ops).matrix, Vec::new()),
    };

    // Per row: constant margin part and the auxiliary columns.
    struct Aux {
        row: usize,
        c: f64,
        g: Vector,
        r: f64,
    }
    let mut aux = Vec::new();
    let mut const_margin = vec![0.0; m];
    for i in 0..m {
        for j in 0..d.noise_len() {
            let r = radii[j];
            if r <= 0.0 {
                continue;
            }
            let c = base[(i, j)];
            let g = Vector::from_iterator(nq, grads.iter().map(|gk| gk[(i, j)]));
            if g.amax() > 1e-14 * (1.0 + c.abs()) {
                aux.push(Aux { row: i, c, g, r });
            } else {
                const_margin[i] += r * c.abs();
            }
        }
    }
    let na = aux.len();
    let nx = nv + nq + na;

    let mut h = Mat::zeros(nx, nx);
    let mut f = Vector::zeros(nx);
    let hp = &cost.h * &p;
    h.view_mut((0, 0), (nv, nv)).copy_from(&p.tr_mul(&hp));
    f.rows_mut(0, nv).copy_from(&p.tr_mul(&(&cost.h * &p0 + &cost.f)));
    if let Feedback::Joint(basis) = feedback {
        let l = &basis.flat_basis;
        h.view_mut((nv, nv), (nq, nq))
            .copy_from(&(l.tr_mul(l) * (2.0 * opts.phi_reg)));
        f.rows_mut(nv, nq)
            .copy_from(&(l.tr_mul(&basis.flat0) * (2.0 * opts.phi_reg)));
    }
    for k in 0..na {
        h[(nv + nq + k, nv + nq + k)] = 2.0 * opts.aux_reg;
    }

    let mut a_in = Mat::zeros(m + 2 * na, nx);
    let mut b_in = Vector::zeros(m + 2 * na);
    let ap = &a_rows * &p;
    let ap0 = &a_rows * &p0;
    for i in 0..m {
        a_in.view_mut((i, 0), (1, nv)).copy_from(&ap.row(i));
        b_in[i] = rows[i].1 - ap0[i] - const_margin[i];
    }
    for (k, x) in aux.iter().enumerate() {
        let col = nv + nq + k;
        a_in[(x.row, col)] = x.r;
        let (r1, r2) = (m + 2 * k, m + 2 * k + 1);
        for q in 0..nq {
            a_in[(r1, nv + q)] = x.g[q];
            a_in[(r2, nv + q)] = -x.g[q];
        }
        a_in[(r1, col)] = -1.0;
        a_in[(r2, col)] = -1.0;
        b_in[r1] = -x.c;
        b_in[r2] = x.c;
    }
    let prog = MathProgram::new(nx).with_objective(h, f).with_ineq(a_in, b_in);
    Ok(Reduced { prog, nv, nq })
}

struct Candidate {
    assignment: Assignment,
    v: Vector,
    q: Vector,
    lambda: Vec<f64>,
    objective: f64,
}

fn solve_candidate(
    inst: &ProblemInstance,
    model: &AffineModel,
    ops: &BlockOperators,
    feedback: &Feedback,
    assignment: &[usize],
    opts: &ForwardOptions,
) -> Result<std::result::Result<Candidate, MathProgram>> {
    let rows = constraint_rows(inst, assignment)?;
    let red = build_reduced(inst, model, ops, feedback, &rows, opts)?;
    let sol = solve_qp(&red.prog, &opts.solver)?;
    match sol.status {
        Status::Optimal => Ok(Ok(Candidate {
            assignment: assignment.to_vec(),
            v: sol.x.rows(0, red.nv).into_owned(),
            q: sol.x.rows(red.nv, red.nq).into_owned(),
            lambda: sol.ineq_multipliers.iter().take(rows.len()).copied().collect(),
            objective: sol.objective,
        })),
        Status::Infeasible => Ok(Err(red.prog)),
        Status::Unbounded => Err(Error::Solver("forward program unbounded; check the cost".into())),
        Status::IterLimit => Err(Error::Solver("forward program hit the iteration limit".into())),
    }
}

/// Solves every candidate, keeping the lowest objective (first in order on ties).
fn best_candidate(
    inst: &ProblemInstance,
    model: &AffineModel,
    ops: &BlockOperators,
    feedback: &Feedback,
    candidates: &[Assignment],
    opts: &ForwardOptions,
) -> Result<Candidate> {
    let results: Vec<Result<std::result::Result<Candidate, MathProgram>>> = candidates
        .par_iter()
        .map(|a| solve_candidate(inst, model, ops, feedback, a, opts))
        .collect();
    let mut best: Option<Candidate> = None;
    let mut failed = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r? {
            Ok(c) => {
                if best
                    .as_ref()
                    .is_none_or(|b| c.objective < b.objective - 1e-12 * (1.0 + b.objective.abs()))
                {
                    best = Some(c);
                }
            }
            Err(prog) => failed.push((k, prog)),
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    let violations: Vec<f64> = failed
        .par_iter()
        .map(|(_, prog)| min_violation(prog, &opts.solver).unwrap_or(f64::INFINITY))
        .collect();
    let (k, viol) = violations
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
    Err(Error::Infeasible(format!(
        "all {} disjunct assignments infeasible; least violated {:?} by {:.3e}",
        candidates.len(),
        candidates[failed[k].0],
        viol
    )))
}

/// Default seed: straight line from the start position to the goal, or the
/// obstacle-free optimum when the cost has no goal.
pub fn default_seed_path(inst: &ProblemInstance) -> Result<Vector> {
    let d = inst.dims();
    let model = match &inst.system {
        System::Ltv(s) => AffineModel::exact(s.clone()),
        System::Nonlinear(nl) => {
            let v = Vector::zeros(d.ni * d.horizon);
            let mut s = Vector::zeros(d.stacked_len());
            s.rows_mut(0, d.n * (d.horizon + 1)).copy_from(&nl.simulate(&v));
            if inst.cost.goal.is_none() {
                return Ok(s);
            }
            return Ok(straight_line(inst, s));
        }
    };
    if inst.cost.goal.is_some() {
        return Ok(straight_line(inst, Vector::zeros(d.stacked_len())));
    }
    let ops = build_block_operators(&model.ltv)?;
    let phi = phi_from_k(&FeedbackGain::zeros(&d), &ops)?;
    let free = ProblemInstance {
        unknown: Default::default(),
        ..inst.clone()
    };
    let opts = ForwardOptions::default();
    match solve_candidate(&free, &model, &ops, &Feedback::Fixed(phi), &[], &opts)? {
        Ok(c) => {
            let (p, p0) = model.rollout_map();
            Ok(p * c.v + p0)
        }
        Err(_) => {
            let (p, p0) = model.rollout_map();
            Ok(p * Vector::zeros(d.ni * d.horizon) + p0)
        }
    }
}

fn straight_line(inst: &ProblemInstance, mut s: Vector) -> Vector {
    let d = inst.dims();
    let goal = inst.cost.goal.as_ref().expect("goal checked by caller");
    let x0 = inst.system.x0();
    for t in 0..=d.horizon {
        let a = t as f64 / d.horizon as f64;
        for (k, &i) in inst.cost.position_indices.iter().enumerate() {
            s[d.x_index(t, i)] = (1.0 - a) * x0[i] + a * goal[k];
        }
    }
    s
}

/// Candidate assignments: the heuristic (per conjunct, the disjunct most
/// satisfied by the seed) first, then single flips and per-obstacle uniform
/// face choices ordered by total seed violation, capped at `cap`.
pub fn enumerate_disjunct_assignments(inst: &ProblemInstance, seed: &Vector, cap: usize) -> Result<Vec<Assignment>> {
    let d = inst.dims();
    let conj = inst.unknown.conjuncts(&d);
    if conj.is_empty() {
        return Ok(vec![Vec::new()]);
    }
    if seed.len() != d.stacked_len() {
        return Err(dim("seed path", d.stacked_len(), seed.len()));
    }
    let theta = inst
        .theta_star
        .as_ref()
        .ok_or_else(|| Error::Missing("theta_star is required to rank disjuncts".into()))?;
    let th = theta.as_slice();
    let values: Vec<Vec<f64>> = conj
        .iter()
        .map(|c| c.disjuncts.iter().map(|r| r.value(seed, th)).collect())
        .collect();
    let heuristic: Assignment = values
        .iter()
        .map(|vals| {
            vals.iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (b, &v)| if v < acc.1 { (b, v) } else { acc })
                .0
        })
        .collect();
    let violation = |a: &Assignment| -> f64 { a.iter().zip(&values).map(|(&b, vals)| vals[b].max(0.0)).sum() };

    let mut alts: Vec<Assignment> = Vec::new();
    for (c, vals) in values.iter().enumerate() {
        for b in 0..vals.len() {
            if b != heuristic[c] {
                let mut a = heuristic.clone();
                a[c] = b;
                alts.push(a);
            }
        }
    }
    for o in 0..inst.unknown.obstacles.len() {
        for b in 0..inst.unknown.obstacles[o].faces.len() {
            let mut a = heuristic.clone();
            for (c, cj) in conj.iter().enumerate() {
                if cj.obstacle == o {
                    a[c] = b;
                }
            }
            alts.push(a);
        }
    }
    let mut out = vec![heuristic.clone()];
    let mut scored: Vec<(f64, Assignment)> = alts.into_iter().map(|a| (violation(&a), a)).collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));
    for (_, a) in scored {
        if out.len() >= cap.max(1) {
            break;
        }
        if !out.contains(&a) {
            out.push(a);
        }
    }
    Ok(out)
}

/// Multipliers of `E p = e` from stationarity `grad J + sum lambda a + E^T nu = 0`.
fn dynamics_multipliers(model: &AffineModel, grad: &Vector) -> Vector {
    let (e, _) = model.dynamics_rows();
    let eet = &e * e.transpose();
    let rhs = -(&e * grad);
    eet.cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| Vector::zeros(rhs.len()))
}

fn finish(
    inst: &ProblemInstance,
    model: &AffineModel,
    ops: &BlockOperators,
    feedback: &Feedback,
    mode: &ForwardMode,
    cand: Candidate,
    iterations: usize,
) -> Result<ForwardSolution> {
    let d = ops.dims;
    let (p, p0) = model.rollout_map();
    let stacked = &p * &cand.v + p0;
    let (phi, gain) = match (feedback, mode) {
        (Feedback::Joint(basis), _) => {
            let phi = phi_from_ue(&basis.ue_from_params(&cand.q, &d), ops);
            let gain = k_from_phi(&phi, &d)?;
            (phi, gain)
        }
        (Feedback::Fixed(phi), ForwardMode::FixedGain(k)) => (phi.clone(), k.clone()),
        (Feedback::Fixed(phi), _) => (phi.clone(), k_from_phi(phi, &d)?),
    };
    let rows = constraint_rows(inst, &cand.assignment)?;
    let map = noise_map(&phi, ops);
    let cost = inst.cost.quadratic(&d)?;
    let mut grad = cost.gradient(&stacked);
    let mut margins = Vec::with_capacity(rows.len());
    for ((a, b), lam) in rows.iter().zip(&cand.lambda) {
        grad.axpy(*lam, a, 1.0);
        margins.push(tighten_halfspace(a, *b, &map, &inst.noise)?.margin);
    }
    let nu = dynamics_multipliers(model, &grad);
    let nk = inst.known.halfspaces.len();
    Ok(ForwardSolution {
        z: stacked.rows(0, d.n * (d.horizon + 1)).into_owned(),
        v: cand.v,
        phi,
        gain,
        lambda_known: cand.lambda[..nk].to_vec(),
        lambda_unknown: cand.lambda[nk..].to_vec(),
        nu: nu.iter().copied().collect(),
        assignment: cand.assignment,
        margins_known: margins[..nk].to_vec(),
        margins_unknown: margins[nk..].to_vec(),
        objective: cost.value(&stacked),
        regularized_objective: cand.objective,
        mode: mode.name().to_string(),
        model: model.ltv.clone(),
        model_offsets: model.offsets.iter().map(|o| o.iter().copied().collect()).collect(),
        iterations,
    })
}

pub fn solve_forward(inst: &ProblemInstance, mode: &ForwardMode) -> Result<ForwardSolution> {
    solve_forward_with(inst, mode, &ForwardOptions::default())
}

pub fn solve_forward_with(
    inst: &ProblemInstance,
    mode: &ForwardMode,
    opts: &ForwardOptions,
) -> Result<ForwardSolution> {
    validate_instance(inst).into_result()?;
    if !inst.unknown.is_empty() && inst.theta_star.is_none() {
        return Err(Error::Missing(
            "theta_star is required for forward synthesis with unknown constraints".into(),
        ));
    }
    match &inst.system {
        System::Ltv(s) => {
            let model = AffineModel::exact(s.clone());
            let ops = build_block_operators(s)?;
            let basis;
            let feedback = match mode {
                ForwardMode::Joint => {
                    basis = ResponseBasis::new(&ops);
                    Feedback::Joint(&basis)
                }
                ForwardMode::FixedPhi(phi) => {
                    let rep = verify_response(phi, &ops, DEFAULT_RESPONSE_TOL.max(1e-6));
                    if !rep.pass {
                        return Err(Error::Validation(format!(
                            "fixed response is not achievable (residuals {:.2e}, {:.2e}, {:.2e})",
                            rep.controllability, rep.observability, rep.upper_block
                        )));
                    }
                    Feedback::Fixed(phi.clone())
                }
                ForwardMode::FixedGain(k) => Feedback::Fixed(phi_from_k(k, &ops)?),
            };
            let seed = default_seed_path(inst)?;
            let candidates = enumerate_disjunct_assignments(inst, &seed, opts.max_assignments)?;
            let best = best_candidate(inst, &model, &ops, &feedback, &candidates, opts)?;
            finish(inst, &model, &ops, &feedback, mode, best, 1)
        }
        System::Nonlinear(_) => solve_nonlinear(inst, mode, opts),
    }
}

/// Sequential linearization: re-linearize about the simulated nominal until it
/// stops moving. The disjunct assignment is fixed after the first pass.
fn solve_nonlinear(inst: &ProblemInstance, mode: &ForwardMode, opts: &ForwardOptions) -> Result<ForwardSolution> {
    let nl = inst.system.as_nonlinear();
    let d = nl.dims();
    let gain = match mode {
        ForwardMode::Joint => None,
        ForwardMode::FixedGain(k) => Some(k.clone()),
        ForwardMode::FixedPhi(phi) => Some(k_from_phi(phi, &d)?),
    };
    let mut v_ref = Vector::zeros(d.ni * d.horizon);
    let mut z_ref = nl.simulate(&v_ref);
    let mut assignment: Option<Assignment> = None;
    let mut last = None;
    for it in 1..=opts.sqp_max_iter {
        let states: Vec<Vector> = (0..d.horizon).map(|t| z_ref.rows(t * d.n, d.n).into_owned()).collect();
        let inputs: Vec<Vector> = (0..d.horizon)
            .map(|t| v_ref.rows(t * d.ni, d.ni).into_owned())
            .collect();
        let ltv = linearize(&nl, &states, &inputs)?;
        let offsets = (0..d.horizon)
            .map(|t| nl.step(t, &states[t], &inputs[t]) - &ltv.a[t] * &states[t] - &ltv.b[t] * &inputs[t])
            .collect();
        let model = AffineModel { ltv, offsets };
        let ops = build_block_operators(&model.ltv)?;
        let basis;
        let feedback = match &gain {
            None => {
                basis = ResponseBasis::new(&ops);
                Feedback::Joint(&basis)
            }
            Some(k) => Feedback::Fixed(phi_from_k(k, &ops)?),
        };
        let candidates = match &assignment {
            Some(a) => vec![a.clone()],
            None => {
                let seed = default_seed_path(inst)?;
                enumerate_disjunct_assignments(inst, &seed, opts.max_assignments)?
            }
        };
        let best = best_candidate(inst, &model, &ops, &feedback, &candidates, opts)?;
        assignment = Some(best.assignment.clone());
        let v_new = best.v.clone();
        let z_new = nl.simulate(&v_new);
        let step = (&z_new - &z_ref).amax().max((&v_new - &v_ref).amax());
        let mode_for_finish = match &gain {
            Some(k) => ForwardMode::FixedGain(k.clone()),
            None => ForwardMode::Joint,
        };
        let sol = finish(inst, &model, &ops, &feedback, &mode_for_finish, best, it)?;
        v_ref = v_new;
        z_ref = z_new;
        last = Some(sol);
        if step <= opts.sqp_tol {
            break;
        }
        if it == opts.sqp_max_iter {
            log::warn!("sequential linearization stopped after {it} iterations (last step {step:.2e})");
        }
    }
    let mut sol = last.ok_or_else(|| Error::Validation("sqp_max_iter must be at least 1".into()))?;
    sol.mode = mode.name().to_string();
    Ok(sol)
}

/// Variable layout of the literal program from [`assemble_forward_program`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardProgram {
    pub program: MathProgram,
    /// Stacked `(z, v)` occupies `0..stacked_len`.
    pub stacked_len: usize,
    /// `(block, row, col)` of each response variable; blocks are 0 = xw, 1 = xe, 2 = uw, 3 = ue.
    pub phi_vars: Vec<(usize, usize, usize)>,
    pub aux_vars: usize,
    pub dynamics_rows: usize,
    pub response_rows: usize,
    /// Index in `a_in` of each tightened constraint (known first).
    pub constraint_rows: Vec<usize>,
}

fn block_lower(r: usize, c: usize, rb: usize, cb: usize) -> bool {
    c / cb <= r / rb
}

/// The full program over `(z, v, Phi, aux)` with explicit achievability
/// equalities. The reduced solver is equivalent; this form is for inspection
/// and cross-checking.
pub fn assemble_forward_program(
    inst: &ProblemInstance,
    mode: &ForwardMode,
    assignment: &[usize],
    opts: &ForwardOptions,
) -> Result<ForwardProgram> {
    let ltv = inst
        .system
        .as_ltv()
        .ok_or_else(|| Error::Validation("literal program needs a linear system; linearize first".into()))?;
    let model = AffineModel::exact(ltv.clone());
    let ops = build_block_operators(ltv)?;
    let d = ops.dims;
    let (n, ni, no, tt) = (d.n, d.ni, d.no, d.horizon);
    let (nt, nit, not) = (n * tt, ni * tt, no * tt);
    let rows = constraint_rows(inst, assignment)?;
    let s = d.stacked_len();
    let radii = column_radii(&d, &inst.noise);

    let fixed_phi = match mode {
        ForwardMode::Joint => None,
        ForwardMode::FixedPhi(phi) => {
            if !verify_response(phi, &ops, 1e-6).pass {
                return Err(Error::Validation("fixed response is not achievable".into()));
            }
            Some(phi.clone())
        }
        ForwardMode::FixedGain(k) => Some(phi_from_k(k, &ops)?),
    };

    let mut phi_vars = Vec::new();
    if fixed_phi.is_none() {
        for (blk, (nr, nc, rb, cb)) in [(nt, nt, n, n), (nt, not, n, no), (nit, nt, ni, n), (nit, not, ni, no)]
            .into_iter()
            .enumerate()
        {
            for r in 0..nr {
                for c in 0..nc {
                    if block_lower(r, c, rb, cb) {
                        phi_vars.push((blk, r, c));
                    }
                }
            }
        }
    }
    let np = phi_vars.len();
    let index_of = |blk: usize, r: usize, c: usize| phi_vars.iter().position(|&v| v == (blk, r, c));

    // Noise map as an affine function of the response variables.
    let zero = SystemResponse {
        xw: Mat::zeros(nt, nt),
        xe: Mat::zeros(nt, not),
        uw: Mat::zeros(nit, nt),
        ue: Mat::zeros(nit, not),
    };
    let (map_const, map_lin): (Mat, Vec<Mat>) = match &fixed_phi {
        Some(phi) => (noise_map(phi, &ops).matrix, Vec::new()),
        None => {
            let m0 = noise_map(&zero, &ops).matrix;
            let lin = phi_vars
                .iter()
                .map(|&(blk, r, c)| {
                    let mut ph = zero.clone();
                    match blk {
                        0 => ph.xw[(r, c)] = 1.0,
                        1 => ph.xe[(r, c)] = 1.0,
                        2 => ph.uw[(r, c)] = 1.0,
                        _ => ph.ue[(r, c)] = 1.0,
                    }
                    noise_map(&ph, &ops).matrix - &m0
                })
                .collect();
            (m0, lin)
        }
    };

    let active_cols: Vec<usize> = (0..d.noise_len()).filter(|&j| radii[j] > 0.0).collect();
    let na = if fixed_phi.is_none() {
        rows.len() * active_cols.len()
    } else {
        0
    };
    let nx = s + np + na;
    let mut prog = MathProgram::new(nx);

    let (e, erhs) = model.dynamics_rows();
    for i in 0..e.nrows() {
        let mut row = vec![0.0; nx];
        row[..s].copy_from_slice(e.row(i).transpose().as_slice());
        prog.push_eq(&row, erhs[i]);
    }
    let dynamics_rows = e.nrows();

    let mut response_rows = 0;
    if fixed_phi.is_none() {
        let i_za = Mat::identity(nt, nt) - &ops.z * &ops.cal_a;
        let zb = &ops.z * &ops.cal_b;
        // (I - Z A) Phi_x. - Z B Phi_u. = [I 0]
        for (bx, bu, nc, cb, ident) in [(0, 2, nt, n, true), (1, 3, not, no, false)] {
            for i in 0..nt {
                for j in 0..nc {
                    if !block_lower(i, j, n, cb) {
                        continue;
                    }
                    let mut row = vec![0.0; nx];
                    for k in 0..nt {
                        if let Some(v) = index_of(bx, k, j) {
                            row[s + v] += i_za[(i, k)];
                        }
                    }
                    for k in 0..nit {
                        if let Some(v) = index_of(bu, k, j) {
                            row[s + v] -= zb[(i, k)];
                        }
                    }
                    prog.push_eq(&row, if ident && i == j { 1.0 } else { 0.0 });
                    response_rows += 1;
                }
            }
        }
        // Phi_.w (I - Z A) - Phi_.e C = [I; 0]
        for (bw, be, nr, rb, ident) in [(0, 1, nt, n, true), (2, 3, nit, ni, false)] {
            for i in 0..nr {
                for j in 0..nt {
                    if !block_lower(i, j, rb, n) {
                        continue;
                    }
                    let mut row = vec![0.0; nx];
                    for k in 0..nt {
                        if let Some(v) = index_of(bw, i, k) {
                            row[s + v] += i_za[(k, j)];
                        }
                    }
                    for k in 0..not {
                        if let Some(v) = index_of(be, i, k) {
                            row[s + v] -= ops.cal_c[(k, j)];
                        }
                    }
                    prog.push_eq(&row, if ident && i == j { 1.0 } else { 0.0 });
                    response_rows += 1;
                }
            }
        }
    }

    let mut constraint_rows_idx = Vec::with_capacity(rows.len());
    let mut aux_k = 0;
    let mut aux_pairs = Vec::new();
    for (a, b) in &rows {
        let mut row = vec![0.0; nx];
        row[..s].copy_from_slice(a.as_slice());
        let base = map_const.tr_mul(a);
        let mut rhs = *b;
        match &fixed_phi {
            Some(_) => {
                rhs -= active_cols.iter().map(|&j| radii[j] * base[j].abs()).sum::<f64>();
            }
            None => {
                for &j in &active_cols {
                    let col = s + np + aux_k;
                    row[col] = radii[j];
                    let g: Vec<f64> = map_lin.iter().map(|mk| mk.column(j).dot(a)).collect();
                    aux_pairs.push((col, base[j], g));
                    aux_k += 1;
                }
            }
        }
        constraint_rows_idx.push(prog.a_in.nrows());
        prog.push_ineq(&row, rhs);
    }
    for (col, c, g) in aux_pairs {
        for sign in [1.0, -1.0] {
            let mut row = vec![0.0; nx];
            for (k, gk) in g.iter().enumerate() {
                row[s + k] = sign * gk;
            }
            row[col] = -1.0;
            prog.push_ineq(&row, -sign * c);
        }
    }

    let cost = inst.cost.quadratic(&d)?;
    let mut h = Mat::zeros(nx, nx);
    let mut f = Vector::zeros(nx);
    h.view_mut((0, 0), (s, s)).copy_from(&cost.h);
    f.rows_mut(0, s).copy_from(&cost.f);
    for k in 0..np {
        h[(s + k, s + k)] = 2.0 * opts.phi_reg;
    }
    for k in 0..na {
        h[(s + np + k, s + np + k)] = 2.0 * opts.aux_reg;
    }
    prog.objective = crate::opt::Objective::Quadratic { h, f };
    Ok(ForwardProgram {
        program: prog,
        stacked_len: s,
        phi_vars,
        aux_vars: na,
        dynamics_rows,
        response_rows,
        constraint_rows: constraint_rows_idx,
    })
}

impl ForwardProgram {
    /// Packs a solution into this program's variables, setting each auxiliary
    /// variable to the absolute value it bounds.
    pub fn pack(&self, sol: &ForwardSolution) -> Vector {
        let p = &self.program;
        let mut x = Vector::zeros(p.num_vars);
        let st = sol.stacked();
        x.rows_mut(0, self.stacked_len).copy_from(&st);
        let s = self.stacked_len;
        for (k, &(blk, r, c)) in self.phi_vars.iter().enumerate() {
            x[s + k] = match blk {
                0 => sol.phi.xw[(r, c)],
                1 => sol.phi.xe[(r, c)],
                2 => sol.phi.uw[(r, c)],
                _ => sol.phi.ue[(r, c)],
            };
        }
        // Each aux pair (rows 2k, 2k+1 after the tightened rows) bounds |c + g.x|.
        let first = self.constraint_rows.len();
        for k in 0..self.aux_vars {
            let r = p.a_in.row(first + 2 * k);
            let col = s + self.phi_vars.len() + k;
            let mut val = -p.b_in[first + 2 * k];
            for j in 0..s + self.phi_vars.len() {
                val += r[j] * x[j];
            }
            x[col] = val.abs();
        }
        x
    }
}
