//! Continuous QP/LP front end over the dual active-set core.
//!
//! Rows are normalized so tolerances are absolute distances. Objectives that are
//! not strictly convex are handled by proximal-point iterations
//! `x_{k+1} = argmin f(x) + |x - x_k|^2 / (2 mu)`, each a strictly convex QP.

use nalgebra::Cholesky;

use super::gi::{self, Outcome};
use super::{MathProgram, Objective, RowRef, Solution, SolverSettings, Status};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

struct Rows {
    c: Mat,
    d: Vector,
    n_eq: usize,
    scale: Vec<f64>,
    origin: Vec<RowRef>,
}

/// Normalized `C x >= d` rows; `Err(row)` names a constant row that is violated.
fn build_rows(prog: &MathProgram, feas_tol: f64) -> std::result::Result<Rows, RowRef> {
    let n = prog.num_vars;
    let mut eq: Vec<(Vec<f64>, f64, f64, RowRef)> = Vec::new();
    let mut ineq: Vec<(Vec<f64>, f64, f64, RowRef)> = Vec::new();
    for i in 0..prog.a_eq.nrows() {
        let row: Vec<f64> = prog.a_eq.row(i).iter().copied().collect();
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm == 0.0 {
            if prog.b_eq[i].abs() > feas_tol {
                return Err(RowRef::Eq(i));
            }
            continue;
        }
        eq.push((
            row.iter().map(|v| v / nrm).collect(),
            prog.b_eq[i] / nrm,
            nrm,
            RowRef::Eq(i),
        ));
    }
    for i in 0..n {
        let (lo, hi) = (prog.lower[i], prog.upper[i]);
        if lo > hi + feas_tol {
            return Err(RowRef::Lower(i));
        }
        if lo.is_finite() && hi.is_finite() && (hi - lo).abs() <= 1e-15 * (1.0 + lo.abs()) {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            eq.push((row, lo, 1.0, RowRef::Lower(i)));
            continue;
        }
        if lo.is_finite() {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            ineq.push((row, lo, 1.0, RowRef::Lower(i)));
        }
        if hi.is_finite() {
            let mut row = vec![0.0; n];
            row[i] = -1.0;
            ineq.push((row, -hi, 1.0, RowRef::Upper(i)));
        }
    }
    for i in 0..prog.a_in.nrows() {
        let row: Vec<f64> = prog.a_in.row(i).iter().copied().collect();
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm == 0.0 {
            if prog.b_in[i] < -feas_tol {
                return Err(RowRef::Ineq(i));
            }
            continue;
        }
        ineq.push((
            row.iter().map(|v| -v / nrm).collect(),
            -prog.b_in[i] / nrm,
            nrm,
            RowRef::Ineq(i),
        ));
    }
    let n_eq = eq.len();
    let all: Vec<_> = eq.into_iter().chain(ineq).collect();
    let m = all.len();
    let mut c = Mat::zeros(m, n);
    let mut d = Vector::zeros(m);
    let mut scale = Vec::with_capacity(m);
    let mut origin = Vec::with_capacity(m);
    for (k, (row, rhs, s, o)) in all.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            c[(k, j)] = v;
        }
        d[k] = rhs;
        scale.push(s);
        origin.push(o);
    }
    Ok(Rows {
        c,
        d,
        n_eq,
        scale,
        origin,
    })
}

fn assemble_solution(
    prog: &MathProgram,
    rows: &Rows,
    x: Vector,
    u: &Vector,
    status: Status,
    iterations: usize,
) -> Solution {
    let mut sol = Solution::empty(prog, status);
    for (k, o) in rows.origin.iter().enumerate() {
        let v = u[k] / rows.scale[k];
        match *o {
            // `C x = d` multiplier `u` means grad f = u c, i.e. nu = -u.
            RowRef::Eq(i) => sol.eq_multipliers[i] = -v,
            RowRef::Ineq(i) => sol.ineq_multipliers[i] = v,
            RowRef::Lower(i) => {
                if v >= 0.0 {
                    sol.lower_multipliers[i] = v;
                } else {
                    sol.upper_multipliers[i] = -v;
                }
            }
            RowRef::Upper(i) => sol.upper_multipliers[i] = v,
        }
    }
    sol.objective = prog.objective_value(&x);
    sol.x = x;
    sol.iterations = iterations;
    sol
}

pub fn solve_qp(prog: &MathProgram, settings: &SolverSettings) -> Result<Solution> {
    prog.validate()?;
    if !prog.binaries.is_empty() {
        return Err(Error::Validation("solve_qp called with binary variables".into()));
    }
    solve_continuous(prog, settings)
}

/// Ignores `binaries`; callers relax or fix them through the bounds.
pub(crate) fn solve_continuous(prog: &MathProgram, settings: &SolverSettings) -> Result<Solution> {
    let n = prog.num_vars;
    let rows = match build_rows(prog, settings.feas_tol) {
        Ok(r) => r,
        Err(bad) => {
            let mut s = Solution::empty(prog, Status::Infeasible);
            s.certificate = vec![bad];
            return Ok(s);
        }
    };
    let (h, f) = match &prog.objective {
        Objective::Feasibility => (Mat::identity(n, n), Vector::zeros(n)),
        Objective::Quadratic { h, f } => (h.clone(), f.clone()),
    };
    let sel_tol = 1e-2 * settings.feas_tol;

    if n == 0 {
        return Ok(Solution::empty(prog, Status::Optimal));
    }

    let scale = 1.0 + h.amax();
    let strictly_convex = Cholesky::new(h.clone())
        .map(|ch| {
            let dmin = ch.l().diagonal().iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
            dmin * dmin > 1e-11 * scale
        })
        .unwrap_or(false);
    if strictly_convex {
        let res = gi::solve(&h, &f, &rows.c, &rows.d, rows.n_eq, sel_tol, settings.max_iter)
            .ok_or_else(|| Error::Solver("Cholesky factorization failed".into()))?;
        return Ok(finish(prog, &rows, res));
    }

    // Positive semidefiniteness check before proximal iterations.
    let shifted = &h + Mat::identity(n, n) * (1e-9 * scale);
    if Cholesky::new(shifted).is_none() {
        return Err(Error::Validation(
            "objective Hessian is not positive semidefinite".into(),
        ));
    }
    let mut mu = 1.0 / scale;
    let mut xk = Vector::zeros(n);
    let mut total = 0;
    for _ in 0..settings.max_prox_iter {
        let hk = &h + Mat::identity(n, n) / mu;
        let fk = &f - &xk / mu;
        let res = gi::solve(&hk, &fk, &rows.c, &rows.d, rows.n_eq, sel_tol, settings.max_iter)
            .ok_or_else(|| Error::Solver("proximal subproblem factorization failed".into()))?;
        total += res.iterations;
        match res.outcome {
            Outcome::Optimal => {}
            _ => {
                let mut sol = finish(prog, &rows, res);
                sol.iterations = total;
                return Ok(sol);
            }
        }
        let step = (&res.x - &xk).amax();
        let xnorm = res.x.amax();
        if xnorm > 1e12 {
            let mut s = Solution::empty(prog, Status::Unbounded);
            s.x = res.x;
            s.iterations = total;
            return Ok(s);
        }
        // `(x - x_k) / mu` is the stationarity residual of the original problem.
        let done =
            step <= 1e-12 * (1.0 + xnorm) || (step <= 1e-7 * (1.0 + xnorm) && step / mu <= 1e-3 * settings.stat_tol);
        xk = res.x.clone();
        if done {
            let mut sol = assemble_solution(prog, &rows, res.x, &res.u, Status::Optimal, total);
            sol.iterations = total;
            return Ok(sol);
        }
        // Larger steps converge faster; cap keeps the subproblem well scaled.
        let fscale = f.amax().max(1e-12);
        let cap = 1e6 * (1.0 + xnorm) / fscale;
        mu = (mu * 10.0).min(cap.max(mu));
    }
    let mut s = Solution::empty(prog, Status::IterLimit);
    s.x = xk;
    s.iterations = total;
    Ok(s)
}

fn finish(prog: &MathProgram, rows: &Rows, res: gi::GiResult) -> Solution {
    match res.outcome {
        Outcome::Optimal => assemble_solution(prog, rows, res.x, &res.u, Status::Optimal, res.iterations),
        Outcome::IterLimit => {
            let mut s = assemble_solution(prog, rows, res.x, &res.u, Status::IterLimit, res.iterations);
            s.objective = f64::NAN;
            s
        }
        Outcome::Infeasible(conflict) => {
            let mut s = Solution::empty(prog, Status::Infeasible);
            s.x = res.x;
            s.iterations = res.iterations;
            s.certificate = conflict.into_iter().map(|k| rows.origin[k]).collect();
            s
        }
    }
}
