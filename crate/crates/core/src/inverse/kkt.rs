//! Constraint-parameter inference by inverting the demonstrator's KKT conditions.
//!
//! With the recovered nominal `p = (z, v)` and response frozen, every constraint
//! value is affine in `theta`:
//! `g(theta) = a . p + margin - offset(theta)`. Complementarity and the choice
//! of disjunct per obstacle and time are modeled with big-M binaries, so the
//! conditions form a MILP in `(theta, lambda, s, c)`. Stationarity is taken
//! over `(z, v)` and projected onto the dynamics nullspace, which removes the
//! equality multipliers; they are recovered afterward by least squares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{tighten_halfspace, AffineModel};
use crate::linalg::{serde_vec, Mat, Vector};
use crate::model::{build_block_operators, AffineParam, ProblemInstance};
use crate::opt::{solve_milp, MathProgram, Objective, SolverSettings, Status};
use crate::sls::noise_map;

use super::recover::RecoveredPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KktOptions {
    /// Upper bound on every inequality multiplier.
    pub m_lambda: f64,
    /// Replaces the derived constraint big-M (for audits).
    pub m_g_override: Option<f64>,
    /// Absolute tolerance on constraint values and on projected stationarity.
    pub tol: f64,
    /// Minimize violations instead of requiring exact conditions (corrupted data).
    pub relaxed: bool,
    pub solver: SolverSettings,
}

impl Default for KktOptions {
    fn default() -> Self {
        KktOptions {
            m_lambda: 1e3,
            m_g_override: None,
            tol: 1e-7,
            relaxed: false,
            solver: SolverSettings::default(),
        }
    }
}

/// One constraint at the frozen nominal: `g(theta) = base - offset(theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRow {
    pub a: Vector,
    /// `a . p + margin`.
    pub base: f64,
    pub margin: f64,
    pub offset: AffineParam,
}

impl FrozenRow {
    pub fn value(&self, theta: &[f64]) -> f64 {
        self.base - self.offset.eval(theta)
    }

    /// `max |g(theta)|` over the parameter box.
    fn max_abs_over(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let mut gmax = self.base - self.offset.constant;
        let mut gmin = gmax;
        for (k, &c) in self.offset.coeffs.iter().enumerate() {
            let (a, b) = (-c * lo[k], -c * hi[k]);
            gmax += a.max(b);
            gmin += a.min(b);
        }
        gmax.abs().max(gmin.abs())
    }
}

/// Conjunct `k` owns unknown rows `first..first + count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConjunctSpan {
    pub obstacle: usize,
    pub time: usize,
    pub first: usize,
    pub count: usize,
}

/// Variable offsets inside the MILP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KktLayout {
    pub theta: usize,
    pub lambda_known: usize,
    pub lambda_unknown: usize,
    /// Disjunct selection, one per unknown row.
    pub select: usize,
    pub comp_known: usize,
    pub comp_unknown: usize,
    /// Relaxed mode: stationarity residual bounds.
    pub residual: usize,
    /// Relaxed mode: constraint-value slacks, known then unknown.
    pub slack: usize,
    pub num_vars: usize,
}

#[derive(Debug, Clone)]
pub struct KktProgram {
    pub program: MathProgram,
    pub layout: KktLayout,
    pub param_dim: usize,
    pub param_lower: Vec<f64>,
    pub param_upper: Vec<f64>,
    pub known: Vec<FrozenRow>,
    pub unknown: Vec<FrozenRow>,
    pub conjuncts: Vec<ConjunctSpan>,
    pub p: Vector,
    pub grad_j: Vector,
    pub model: AffineModel,
    pub m_lambda: f64,
    pub m_g_known: Vec<f64>,
    pub m_g_unknown: Vec<f64>,
    pub opts: KktOptions,
}

pub fn build_kkt_program(policy: &RecoveredPolicy, inst: &ProblemInstance, opts: &KktOptions) -> Result<KktProgram> {
    let fam = &inst.unknown;
    let d = inst.dims();
    for k in 0..fam.param_dim {
        let (lo, hi) = (fam.param_lower[k], fam.param_upper[k]);
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::Validation(format!(
                "parameter box component {k} is [{lo}, {hi}]; a bounded box is needed to derive big-M constants"
            )));
        }
    }
    let model = policy.affine_model();
    let ops = build_block_operators(&model.ltv)?;
    let map = noise_map(&policy.phi, &ops);
    let p = policy.stacked();
    if p.len() != d.stacked_len() {
        return Err(crate::error::dim("recovered nominal", d.stacked_len(), p.len()));
    }
    let frozen = |a: &Vector, offset: AffineParam| -> Result<FrozenRow> {
        let margin = tighten_halfspace(a, 0.0, &map, &inst.noise)?.margin;
        Ok(FrozenRow {
            a: a.clone(),
            base: a.dot(&p) + margin,
            margin,
            offset,
        })
    };
    let known = inst
        .known
        .halfspaces
        .iter()
        .map(|h| {
            frozen(
                &h.a,
                AffineParam {
                    constant: h.b,
                    coeffs: vec![0.0; fam.param_dim],
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut unknown = Vec::new();
    let mut conjuncts = Vec::new();
    for c in fam.conjuncts(&d) {
        conjuncts.push(ConjunctSpan {
            obstacle: c.obstacle,
            time: c.time,
            first: unknown.len(),
            count: c.disjuncts.len(),
        });
        for row in &c.disjuncts {
            unknown.push(frozen(&row.a, row.offset.clone())?);
        }
    }
    let grad_j = inst.cost.quadratic(&d)?.gradient(&p);
    let (pmap, _) = model.rollout_map();

    let nk = known.len();
    let nu = unknown.len();
    let nd = fam.param_dim;
    let ns = if opts.relaxed { pmap.ncols() } else { 0 };
    let nsl = if opts.relaxed { nk + nu } else { 0 };
    let layout = KktLayout {
        theta: 0,
        lambda_known: nd,
        lambda_unknown: nd + nk,
        select: nd + nk + nu,
        comp_known: nd + nk + 2 * nu,
        comp_unknown: nd + 2 * nk + 2 * nu,
        residual: nd + 2 * nk + 3 * nu,
        slack: nd + 2 * nk + 3 * nu + ns,
        num_vars: nd + 2 * nk + 3 * nu + ns + nsl,
    };
    let nx = layout.num_vars;
    let mut prog = MathProgram::new(nx);
    for k in 0..nd {
        prog.lower[k] = fam.param_lower[k];
        prog.upper[k] = fam.param_upper[k];
    }
    for i in 0..nk + nu {
        prog.lower[layout.lambda_known + i] = 0.0;
        prog.upper[layout.lambda_known + i] = opts.m_lambda;
    }
    for i in layout.select..layout.residual {
        prog.set_binary(i);
    }
    for i in layout.residual..nx {
        prog.lower[i] = 0.0;
    }

    let floor = 1e-3;
    let m_g = |r: &FrozenRow| -> f64 {
        opts.m_g_override
            .unwrap_or_else(|| (2.0 * r.max_abs_over(&fam.param_lower, &fam.param_upper)).max(floor))
    };
    let m_g_known: Vec<f64> = known.iter().map(m_g).collect();
    let m_g_unknown: Vec<f64> = unknown.iter().map(m_g).collect();
    let tol = opts.tol;

    // Rows are assembled densely; the programs here have at most a few hundred variables.
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut eqs: Vec<(Vec<f64>, f64)> = Vec::new();
    let zero = || vec![0.0; nx];

    for (i, r) in known.iter().enumerate() {
        let g = r.base - r.offset.constant;
        let lam = layout.lambda_known + i;
        let comp = layout.comp_known + i;
        let slack = opts.relaxed.then_some(layout.slack + i);
        // g <= tol
        let mut row = zero();
        if let Some(s) = slack {
            row[s] = -1.0;
        }
        rows.push((row, tol - g));
        // lambda <= M_lambda c
        let mut row = zero();
        row[lam] = 1.0;
        row[comp] = -opts.m_lambda;
        rows.push((row, 0.0));
        // -g <= M_g (1 - c) + tol
        let mut row = zero();
        row[comp] = m_g_known[i];
        if let Some(s) = slack {
            row[s] = -1.0;
        }
        rows.push((row, m_g_known[i] + g + tol));
    }
    for (j, r) in unknown.iter().enumerate() {
        let lam = layout.lambda_unknown + j;
        let sel = layout.select + j;
        let comp = layout.comp_unknown + j;
        let slack = opts.relaxed.then_some(layout.slack + nk + j);
        let mg = m_g_unknown[j];
        let c0 = r.base - r.offset.constant;
        // g(theta) <= M_g (1 - s) + tol, with g = c0 - coeffs . theta
        let mut row = zero();
        for (k, &c) in r.offset.coeffs.iter().enumerate() {
            row[layout.theta + k] = -c;
        }
        row[sel] = mg;
        if let Some(s) = slack {
            row[s] = -1.0;
        }
        rows.push((row, mg - c0 + tol));
        // lambda <= M_lambda s, lambda <= M_lambda c
        for bin in [sel, comp] {
            let mut row = zero();
            row[lam] = 1.0;
            row[bin] = -opts.m_lambda;
            rows.push((row, 0.0));
        }
        // -g(theta) <= M_g (1 - c) + tol
        let mut row = zero();
        for (k, &c) in r.offset.coeffs.iter().enumerate() {
            row[layout.theta + k] = c;
        }
        row[comp] = mg;
        if let Some(s) = slack {
            row[s] = -1.0;
        }
        rows.push((row, mg + c0 + tol));
    }
    for cj in &conjuncts {
        let mut row = zero();
        for j in cj.first..cj.first + cj.count {
            row[layout.select + j] = 1.0;
        }
        eqs.push((row, 1.0));
    }

    // Projected stationarity: P^T (grad J + sum lambda a) = 0.
    let q0 = pmap.tr_mul(&grad_j);
    let stat_tol = tol * (1.0 + q0.amax());
    let cols: Vec<Vector> = known.iter().chain(&unknown).map(|r| pmap.tr_mul(&r.a)).collect();
    for k in 0..pmap.ncols() {
        for sign in [1.0, -1.0] {
            let mut row = zero();
            for (i, c) in cols.iter().enumerate() {
                row[layout.lambda_known + i] = sign * c[k];
            }
            let rhs = if opts.relaxed {
                row[layout.residual + k] = -1.0;
                -sign * q0[k]
            } else {
                -sign * q0[k] + stat_tol
            };
            rows.push((row, rhs));
        }
    }

    let mut a_in = Mat::zeros(rows.len(), nx);
    let mut b_in = Vector::zeros(rows.len());
    for (i, (r, b)) in rows.iter().enumerate() {
        a_in.set_row(i, &nalgebra::RowDVector::from_row_slice(r));
        b_in[i] = *b;
    }
    let mut a_eq = Mat::zeros(eqs.len(), nx);
    let mut b_eq = Vector::zeros(eqs.len());
    for (i, (r, b)) in eqs.iter().enumerate() {
        a_eq.set_row(i, &nalgebra::RowDVector::from_row_slice(r));
        b_eq[i] = *b;
    }
    prog.a_in = a_in;
    prog.b_in = b_in;
    prog.a_eq = a_eq;
    prog.b_eq = b_eq;
    if opts.relaxed {
        let mut f = Vector::zeros(nx);
        for i in layout.residual..nx {
            f[i] = 1.0;
        }
        prog.objective = Objective::Quadratic {
            h: Mat::zeros(nx, nx),
            f,
        };
    }
    Ok(KktProgram {
        program: prog,
        layout,
        param_dim: nd,
        param_lower: fam.param_lower.clone(),
        param_upper: fam.param_upper.clone(),
        known,
        unknown,
        conjuncts,
        p,
        grad_j,
        model,
        m_lambda: opts.m_lambda,
        m_g_known,
        m_g_unknown,
        opts: *opts,
    })
}

impl KktProgram {
    /// Copy with `theta` pinned, turning inference into a membership test.
    pub fn with_theta_fixed(&self, theta: &[f64]) -> Result<KktProgram> {
        if theta.len() != self.param_dim {
            return Err(crate::error::dim("theta", self.param_dim, theta.len()));
        }
        let mut out = self.clone();
        for (k, &v) in theta.iter().enumerate() {
            out.program.lower[self.layout.theta + k] = v;
            out.program.upper[self.layout.theta + k] = v;
        }
        Ok(out)
    }

    /// Equality multipliers from `E^T nu = -(grad J + sum lambda a)` by least squares.
    pub fn equality_multipliers(&self, lambda_known: &[f64], lambda_unknown: &[f64]) -> Vector {
        let mut g = self.grad_j.clone();
        for (r, l) in self
            .known
            .iter()
            .zip(lambda_known)
            .chain(self.unknown.iter().zip(lambda_unknown))
        {
            g.axpy(*l, &r.a, 1.0);
        }
        let (e, _) = self.model.dynamics_rows();
        let eet = &e * e.transpose();
        let rhs = -(&e * g);
        eet.cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| Vector::zeros(rhs.len()))
    }

    /// Reads a witness out of a MILP point.
    pub fn witness_from(&self, x: &Vector, status: Status) -> ParamWitness {
        let l = &self.layout;
        let nk = self.known.len();
        let nu = self.unknown.len();
        let theta = x.rows(l.theta, self.param_dim).into_owned();
        let lambda_known: Vec<f64> = (0..nk).map(|i| x[l.lambda_known + i].max(0.0)).collect();
        let lambda_unknown: Vec<f64> = (0..nu).map(|j| x[l.lambda_unknown + j].max(0.0)).collect();
        let selection: Vec<usize> = self
            .conjuncts
            .iter()
            .map(|c| (0..c.count).find(|&b| x[l.select + c.first + b] > 0.5).unwrap_or(0))
            .collect();
        let nu_vec = self.equality_multipliers(&lambda_known, &lambda_unknown);
        let th = theta.as_slice();
        let at_cap = lambda_known
            .iter()
            .chain(&lambda_unknown)
            .any(|v| *v >= 0.99 * self.m_lambda);
        let g_cap = self
            .known
            .iter()
            .zip(&self.m_g_known)
            .chain(self.unknown.iter().zip(&self.m_g_unknown))
            .any(|(r, m)| r.value(th).abs() >= 0.99 * m);
        ParamWitness {
            theta,
            lambda_known,
            lambda_unknown,
            nu: nu_vec.iter().copied().collect(),
            selection,
            status,
            big_m_saturated: at_cap || g_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamWitness {
    #[serde(with = "serde_vec")]
    pub theta: Vector,
    pub lambda_known: Vec<f64>,
    /// One multiplier per disjunct row, in conjunct order.
    pub lambda_unknown: Vec<f64>,
    pub nu: Vec<f64>,
    /// Chosen disjunct per conjunct.
    pub selection: Vec<usize>,
    pub status: Status,
    /// A multiplier or constraint value within 1% of its big-M cap.
    pub big_m_saturated: bool,
}

impl ParamWitness {
    pub fn is_feasible(&self) -> bool {
        self.status == Status::Optimal
    }
}

/// Any point of the KKT-compatible parameter set, or an infeasible status.
pub fn infer_theta(program: &KktProgram) -> Result<ParamWitness> {
    let sol = solve_milp(&program.program, &program.opts.solver)?;
    match sol.status {
        Status::Optimal => {
            let w = program.witness_from(&sol.x, Status::Optimal);
            if w.big_m_saturated {
                log::warn!("KKT witness touches a big-M cap; the constants may be too tight");
            }
            Ok(w)
        }
        status => Ok(ParamWitness {
            theta: Vector::zeros(program.param_dim),
            lambda_known: Vec::new(),
            lambda_unknown: Vec::new(),
            nu: Vec::new(),
            selection: Vec::new(),
            status,
            big_m_saturated: false,
        }),
    }
}

/// Residual of each KKT condition group, evaluated directly (not through the MILP rows).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// Largest positive known value, or per conjunct the smallest disjunct value.
    pub primal: f64,
    pub dual: f64,
    /// Largest `|lambda g|`.
    pub complementarity: f64,
    /// Infinity norm of `grad J + sum lambda a + E^T nu`.
    pub stationarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal
            .max(self.dual)
            .max(self.complementarity)
            .max(self.stationarity)
    }
}

pub fn replay(program: &KktProgram, w: &ParamWitness) -> KktResiduals {
    let th = w.theta.as_slice();
    let mut primal = 0.0_f64;
    for r in &program.known {
        primal = primal.max(r.value(th));
    }
    for c in &program.conjuncts {
        let best = (c.first..c.first + c.count)
            .map(|j| program.unknown[j].value(th))
            .fold(f64::INFINITY, f64::min);
        primal = primal.max(best);
    }
    let dual = w
        .lambda_known
        .iter()
        .chain(&w.lambda_unknown)
        .fold(0.0_f64, |a, &l| a.max(-l));
    let complementarity = program
        .known
        .iter()
        .zip(&w.lambda_known)
        .chain(program.unknown.iter().zip(&w.lambda_unknown))
        .fold(0.0_f64, |a, (r, l)| a.max((l * r.value(th)).abs()));
    let mut g = program.grad_j.clone();
    for (r, l) in program
        .known
        .iter()
        .zip(&w.lambda_known)
        .chain(program.unknown.iter().zip(&w.lambda_unknown))
    {
        g.axpy(*l, &r.a, 1.0);
    }
    let (e, _) = program.model.dynamics_rows();
    g += e.transpose() * Vector::from_column_slice(&w.nu);
    KktResiduals {
        primal: primal.max(0.0),
        dual,
        complementarity,
        stationarity: g.amax(),
    }
}
