//! Dense convex QP/LP and branch-and-bound MILP/MIQP.
//!
//! Sign convention for multipliers: at an optimum
//! `grad f(x) + A_eq^T nu + A_in^T lambda - mu_lower + mu_upper = 0`
//! with `lambda, mu_lower, mu_upper >= 0`.

mod gi;
mod milp;
mod qp;

pub use milp::{solve_milp, tighten_bounds};
pub use qp::solve_qp;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Any feasible point; relaxations minimize `1/2 |x|^2`.
    Feasibility,
    /// `1/2 x^T H x + f^T x` with `H` symmetric PSD (zero for an LP).
    Quadratic { h: Mat, f: Vector },
}

/// `min objective  s.t.  A_eq x = b_eq,  A_in x <= b_in,  lower <= x <= upper`,
/// with `binaries` restricted to `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MathProgram {
    pub num_vars: usize,
    pub objective: Objective,
    pub a_eq: Mat,
    pub b_eq: Vector,
    pub a_in: Mat,
    pub b_in: Vector,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub binaries: Vec<usize>,
}

impl MathProgram {
    /// Unconstrained, unbounded feasibility problem in `n` variables.
    pub fn new(n: usize) -> Self {
        MathProgram {
            num_vars: n,
            objective: Objective::Feasibility,
            a_eq: Mat::zeros(0, n),
            b_eq: Vector::zeros(0),
            a_in: Mat::zeros(0, n),
            b_in: Vector::zeros(0),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            binaries: Vec::new(),
        }
    }

    pub fn with_objective(mut self, h: Mat, f: Vector) -> Self {
        self.objective = Objective::Quadratic { h, f };
        self
    }

    pub fn with_eq(mut self, a: Mat, b: Vector) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: Mat, b: Vector) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    /// Appends `row . x <= rhs`.
    pub fn push_ineq(&mut self, row: &[f64], rhs: f64) {
        self.a_in = append_row(&self.a_in, row);
        self.b_in = Vector::from_iterator(self.b_in.len() + 1, self.b_in.iter().copied().chain([rhs]));
    }

    /// Appends `row . x = rhs`.
    pub fn push_eq(&mut self, row: &[f64], rhs: f64) {
        self.a_eq = append_row(&self.a_eq, row);
        self.b_eq = Vector::from_iterator(self.b_eq.len() + 1, self.b_eq.iter().copied().chain([rhs]));
    }

    pub fn set_binary(&mut self, i: usize) {
        if !self.binaries.contains(&i) {
            self.binaries.push(i);
            self.binaries.sort_unstable();
        }
        self.lower[i] = self.lower[i].max(0.0);
        self.upper[i] = self.upper[i].min(1.0);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        if self.a_eq.ncols() != n || self.a_in.ncols() != n {
            return Err(dim("constraint columns", n, self.a_eq.ncols().max(self.a_in.ncols())));
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(dim("equality rhs", self.a_eq.nrows(), self.b_eq.len()));
        }
        if self.a_in.nrows() != self.b_in.len() {
            return Err(dim("inequality rhs", self.a_in.nrows(), self.b_in.len()));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(dim("variable bounds", n, self.lower.len()));
        }
        let finite = |m: &Mat| m.iter().all(|v| v.is_finite());
        if !finite(&self.a_eq)
            || !finite(&self.a_in)
            || !self.b_eq.iter().all(|v| v.is_finite())
            || !self.b_in.iter().all(|v| v.is_finite())
        {
            return Err(Error::Validation("non-finite constraint data".into()));
        }
        if self.lower.iter().chain(&self.upper).any(|v| v.is_nan()) {
            return Err(Error::Validation("NaN variable bound".into()));
        }
        if let Objective::Quadratic { h, f } = &self.objective {
            if h.shape() != (n, n) || f.len() != n {
                return Err(dim("objective", n, f.len()));
            }
            if !finite(h) || !f.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation("non-finite objective data".into()));
            }
            if (h - h.transpose()).amax() > 1e-9 * (1.0 + h.amax()) {
                return Err(Error::Validation("objective Hessian not symmetric".into()));
            }
        }
        for &b in &self.binaries {
            if b >= n {
                return Err(Error::Validation(format!("binary index {b} out of range")));
            }
        }
        Ok(())
    }

    /// Objective value; zero for feasibility problems.
    pub fn objective_value(&self, x: &Vector) -> f64 {
        match &self.objective {
            Objective::Feasibility => 0.0,
            Objective::Quadratic { h, f } => 0.5 * x.dot(&(h * x)) + f.dot(x),
        }
    }

    /// Largest violation of any constraint or bound at `x`.
    pub fn primal_residual(&self, x: &Vector) -> f64 {
        let mut r = 0.0_f64;
        if self.a_eq.nrows() > 0 {
            r = r.max((&self.a_eq * x - &self.b_eq).amax());
        }
        if self.a_in.nrows() > 0 {
            r = r.max((&self.a_in * x - &self.b_in).max().max(0.0));
        }
        for i in 0..self.num_vars {
            r = r.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        r
    }

    /// JSON debug dump; infinite bounds become `null`.
    pub fn to_json(&self) -> serde_json::Value {
        use crate::linalg::serde_mat::to_rows;
        let bound = |v: &Vec<f64>| {
            v.iter()
                .map(|b| if b.is_finite() { Some(*b) } else { None })
                .collect::<Vec<_>>()
        };
        let obj = match &self.objective {
            Objective::Feasibility => serde_json::json!({"kind": "feasibility"}),
            Objective::Quadratic { h, f } => {
                serde_json::json!({"kind": "quadratic", "h": to_rows(h), "f": f.as_slice()})
            }
        };
        serde_json::json!({
            "num_vars": self.num_vars,
            "objective": obj,
            "a_eq": to_rows(&self.a_eq),
            "b_eq": self.b_eq.as_slice(),
            "a_in": to_rows(&self.a_in),
            "b_in": self.b_in.as_slice(),
            "lower": bound(&self.lower),
            "upper": bound(&self.upper),
            "binaries": self.binaries,
        })
    }
}

fn append_row(m: &Mat, row: &[f64]) -> Mat {
    let mut out = m.clone().insert_row(m.nrows(), 0.0);
    for (j, v) in row.iter().enumerate() {
        out[(m.nrows(), j)] = *v;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

/// A constraint referenced by an infeasibility certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowRef {
    Eq(usize),
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub status: Status,
    pub x: Vector,
    pub eq_multipliers: Vector,
    pub ineq_multipliers: Vector,
    pub lower_multipliers: Vector,
    pub upper_multipliers: Vector,
    pub objective: f64,
    /// Constraints whose joint enforcement failed, when infeasible.
    pub certificate: Vec<RowRef>,
    pub iterations: usize,
    pub nodes: usize,
}

impl Solution {
    pub(crate) fn empty(prog: &MathProgram, status: Status) -> Self {
        Solution {
            status,
            x: Vector::zeros(prog.num_vars),
            eq_multipliers: Vector::zeros(prog.a_eq.nrows()),
            ineq_multipliers: Vector::zeros(prog.a_in.nrows()),
            lower_multipliers: Vector::zeros(prog.num_vars),
            upper_multipliers: Vector::zeros(prog.num_vars),
            objective: f64::NAN,
            certificate: Vec::new(),
            iterations: 0,
            nodes: 0,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    /// Infinity norm of the Lagrangian gradient.
    pub fn stationarity_residual(&self, prog: &MathProgram) -> f64 {
        let mut g = match &prog.objective {
            Objective::Feasibility => Vector::zeros(prog.num_vars),
            Objective::Quadratic { h, f } => h * &self.x + f,
        };
        g += prog.a_eq.transpose() * &self.eq_multipliers;
        g += prog.a_in.transpose() * &self.ineq_multipliers;
        g -= &self.lower_multipliers;
        g += &self.upper_multipliers;
        g.amax()
    }

    /// Largest `|lambda_i * slack_i|` over inequalities and finite bounds.
    pub fn complementarity_residual(&self, prog: &MathProgram) -> f64 {
        let mut r = 0.0_f64;
        if prog.a_in.nrows() > 0 {
            let s = &prog.a_in * &self.x - &prog.b_in;
            for i in 0..s.len() {
                r = r.max((self.ineq_multipliers[i] * s[i]).abs());
            }
        }
        for i in 0..prog.num_vars {
            if prog.lower[i].is_finite() {
                r = r.max((self.lower_multipliers[i] * (self.x[i] - prog.lower[i])).abs());
            }
            if prog.upper[i].is_finite() {
                r = r.max((self.upper_multipliers[i] * (prog.upper[i] - self.x[i])).abs());
            }
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub feas_tol: f64,
    pub stat_tol: f64,
    pub int_tol: f64,
    pub max_iter: usize,
    pub max_nodes: usize,
    pub max_prox_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            feas_tol: 1e-7,
            stat_tol: 1e-7,
            int_tol: 1e-6,
            max_iter: 200_000,
            max_nodes: 100_000,
            max_prox_iter: 500,
        }
    }
}

/// Smallest achievable worst-case violation of the inequality rows, with the
/// equalities kept exact: `min 1/2 |sigma|^2  s.t.  A_in x <= b_in + sigma,
/// sigma >= 0`. Returns `max sigma` (zero for feasible programs).
pub fn min_violation(prog: &MathProgram, settings: &SolverSettings) -> Result<f64> {
    prog.validate()?;
    let n = prog.num_vars;
    let m = prog.a_in.nrows();
    let mut h = Mat::zeros(n + m, n + m);
    for i in 0..n {
        h[(i, i)] = 1e-8;
    }
    for i in n..n + m {
        h[(i, i)] = 1.0;
    }
    let mut a_in = Mat::zeros(m, n + m);
    a_in.view_mut((0, 0), (m, n)).copy_from(&prog.a_in);
    for i in 0..m {
        a_in[(i, n + i)] = -1.0;
    }
    let mut a_eq = Mat::zeros(prog.a_eq.nrows(), n + m);
    a_eq.view_mut((0, 0), (prog.a_eq.nrows(), n)).copy_from(&prog.a_eq);
    let mut lower = prog.lower.clone();
    lower.extend(std::iter::repeat_n(0.0, m));
    let mut upper = prog.upper.clone();
    upper.extend(std::iter::repeat_n(f64::INFINITY, m));
    let p = MathProgram {
        num_vars: n + m,
        objective: Objective::Quadratic {
            h,
            f: Vector::zeros(n + m),
        },
        a_eq,
        b_eq: prog.b_eq.clone(),
        a_in,
        b_in: prog.b_in.clone(),
        lower,
        upper,
        binaries: Vec::new(),
    };
    let s = solve_qp(&p, settings)?;
    if s.status != Status::Optimal {
        return Ok(f64::INFINITY);
    }
    Ok(s.x.rows(n, m).iter().fold(0.0_f64, |a, &v| a.max(v)))
}

/// Pluggable solver: any engine that consumes a `MathProgram` and reports a `Solution`.
pub trait SolverBackend: Send + Sync {
    fn solve(&self, prog: &MathProgram, settings: &SolverSettings) -> Result<Solution>;
    fn name(&self) -> &str;
}

/// The built-in active-set QP plus branch-and-bound.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinSolver;

impl SolverBackend for BuiltinSolver {
    fn solve(&self, prog: &MathProgram, settings: &SolverSettings) -> Result<Solution> {
        if prog.binaries.is_empty() {
            solve_qp(prog, settings)
        } else {
            solve_milp(prog, settings)
        }
    }
    fn name(&self) -> &str {
        "builtin"
    }
}
