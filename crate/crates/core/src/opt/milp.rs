//! Branch-and-bound over binary variables with activity-based bound tightening
//! at every node. Fixed variables are substituted out before each relaxation.

use super::qp::solve_continuous;
use super::{MathProgram, Objective, Solution, SolverSettings, Status};
use crate::error::Result;
use crate::linalg::{Mat, Vector};

/// Activity-based bound tightening. Binaries are rounded to `{0, 1}` once their
/// range excludes one value. Returns `false` when a row is proven infeasible.
pub fn tighten_bounds(prog: &MathProgram, lb: &mut [f64], ub: &mut [f64], settings: &SolverSettings) -> bool {
    let n = prog.num_vars;
    let mut is_bin = vec![false; n];
    for &b in &prog.binaries {
        is_bin[b] = true;
    }
    // Each row as `a . x <= b`; equalities contribute both directions.
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let sparse = |m: &Mat, i: usize, s: f64| -> Vec<(usize, f64)> {
        (0..m.ncols())
            .filter(|&j| m[(i, j)] != 0.0)
            .map(|j| (j, s * m[(i, j)]))
            .collect()
    };
    for i in 0..prog.a_in.nrows() {
        rows.push((sparse(&prog.a_in, i, 1.0), prog.b_in[i]));
    }
    for i in 0..prog.a_eq.nrows() {
        rows.push((sparse(&prog.a_eq, i, 1.0), prog.b_eq[i]));
        rows.push((sparse(&prog.a_eq, i, -1.0), -prog.b_eq[i]));
    }
    for _pass in 0..20 {
        let mut changed = false;
        for (row, b) in &rows {
            let mut minact = 0.0;
            let mut n_inf = 0;
            let mut inf_idx = usize::MAX;
            let mut scale = b.abs();
            for &(j, a) in row {
                let v = if a > 0.0 { a * lb[j] } else { a * ub[j] };
                if v.is_finite() {
                    minact += v;
                    scale = scale.max(v.abs());
                } else {
                    n_inf += 1;
                    inf_idx = j;
                }
            }
            let tol = settings.feas_tol * (1.0 + scale);
            if n_inf == 0 && minact > b + tol {
                return false;
            }
            if n_inf > 1 {
                continue;
            }
            for &(j, a) in row {
                let contrib = if a > 0.0 { a * lb[j] } else { a * ub[j] };
                let rest = if n_inf == 1 {
                    if j != inf_idx {
                        continue;
                    }
                    minact
                } else {
                    minact - contrib
                };
                let bound = (b - rest) / a;
                let slack = 1e-9 * (1.0 + bound.abs()) + tol / a.abs();
                if a > 0.0 {
                    let mut nb = bound + slack;
                    if is_bin[j] {
                        nb = if nb < 1.0 - settings.int_tol { 0.0 } else { ub[j] };
                    }
                    if nb < ub[j] - 1e-7 * (1.0 + ub[j].abs().min(1e12)) || (is_bin[j] && nb < ub[j]) {
                        ub[j] = nb;
                        changed = true;
                    }
                } else {
                    let mut nb = bound - slack;
                    if is_bin[j] {
                        nb = if nb > settings.int_tol { 1.0 } else { lb[j] };
                    }
                    if nb > lb[j] + 1e-7 * (1.0 + lb[j].abs().min(1e12)) || (is_bin[j] && nb > lb[j]) {
                        lb[j] = nb;
                        changed = true;
                    }
                }
                if lb[j] > ub[j] + tol {
                    return false;
                }
            }
        }
        if !changed {
            break;
        }
    }
    true
}

struct Node {
    lb: Vec<f64>,
    ub: Vec<f64>,
    bound: f64,
    id: usize,
}

/// Relaxation at a node with fixed binaries substituted out.
fn solve_node(prog: &MathProgram, lb: &[f64], ub: &[f64], settings: &SolverSettings) -> Result<Solution> {
    let n = prog.num_vars;
    let mut is_bin = vec![false; n];
    for &b in &prog.binaries {
        is_bin[b] = true;
    }
    // Only binaries are substituted; continuous variables keep their original bounds.
    let fixed: Vec<Option<f64>> = (0..n)
        .map(|j| if is_bin[j] && lb[j] == ub[j] { Some(lb[j]) } else { None })
        .collect();
    let free: Vec<usize> = (0..n).filter(|&j| fixed[j].is_none()).collect();
    let xf = Vector::from_iterator(n, fixed.iter().map(|v| v.unwrap_or(0.0)));
    let nf = free.len();
    let sub = |m: &Mat, b: &Vector| -> (Mat, Vector) {
        let rhs = b - m * &xf;
        let mm = Mat::from_fn(m.nrows(), nf, |i, k| m[(i, free[k])]);
        (mm, rhs)
    };
    let (a_eq, b_eq) = sub(&prog.a_eq, &prog.b_eq);
    let (a_in, b_in) = sub(&prog.a_in, &prog.b_in);
    let objective = match &prog.objective {
        Objective::Feasibility => Objective::Feasibility,
        Objective::Quadratic { h, f } => {
            let hf = Mat::from_fn(nf, nf, |i, k| h[(free[i], free[k])]);
            let g = h * &xf + f;
            let ff = Vector::from_fn(nf, |i, _| g[free[i]]);
            Objective::Quadratic { h: hf, f: ff }
        }
    };
    let reduced = MathProgram {
        num_vars: nf,
        objective,
        a_eq,
        b_eq,
        a_in,
        b_in,
        lower: free
            .iter()
            .map(|&j| if is_bin[j] { lb[j] } else { prog.lower[j] })
            .collect(),
        upper: free
            .iter()
            .map(|&j| if is_bin[j] { ub[j] } else { prog.upper[j] })
            .collect(),
        binaries: Vec::new(),
    };
    let rs = solve_continuous(&reduced, settings)?;
    let mut sol = Solution::empty(prog, rs.status);
    let mut x = xf.clone();
    for (k, &j) in free.iter().enumerate() {
        x[j] = rs.x[k];
        sol.lower_multipliers[j] = rs.lower_multipliers[k];
        sol.upper_multipliers[j] = rs.upper_multipliers[k];
    }
    sol.eq_multipliers = rs.eq_multipliers;
    sol.ineq_multipliers = rs.ineq_multipliers;
    sol.iterations = rs.iterations;
    sol.objective = if rs.status == Status::Optimal {
        prog.objective_value(&x)
    } else {
        f64::NAN
    };
    // Multipliers of substituted binaries absorb the remaining gradient.
    if rs.status == Status::Optimal {
        sol.x = x;
        let resid = gradient_residual(prog, &sol);
        for j in 0..n {
            if fixed[j].is_some() {
                if resid[j] > 0.0 {
                    sol.lower_multipliers[j] = resid[j];
                } else {
                    sol.upper_multipliers[j] = -resid[j];
                }
            }
        }
    } else {
        sol.x = x;
    }
    Ok(sol)
}

fn gradient_residual(prog: &MathProgram, sol: &Solution) -> Vector {
    let mut g = match &prog.objective {
        Objective::Feasibility => Vector::zeros(prog.num_vars),
        Objective::Quadratic { h, f } => h * &sol.x + f,
    };
    g += prog.a_eq.transpose() * &sol.eq_multipliers;
    g += prog.a_in.transpose() * &sol.ineq_multipliers;
    g -= &sol.lower_multipliers;
    g += &sol.upper_multipliers;
    g
}

/// Branch-and-bound. Feasibility problems stop at the first integral node.
pub fn solve_milp(prog: &MathProgram, settings: &SolverSettings) -> Result<Solution> {
    prog.validate()?;
    let feasibility = matches!(prog.objective, Objective::Feasibility);
    let mut root_lb = prog.lower.clone();
    let mut root_ub = prog.upper.clone();
    for &b in &prog.binaries {
        root_lb[b] = root_lb[b].max(0.0);
        root_ub[b] = root_ub[b].min(1.0);
    }
    let mut open = vec![Node {
        lb: root_lb,
        ub: root_ub,
        bound: f64::NEG_INFINITY,
        id: 0,
    }];
    let mut next_id = 1;
    let mut incumbent: Option<Solution> = None;
    let mut nodes = 0;
    let mut iterations = 0;
    let mut saw_unbounded = false;

    while !open.is_empty() {
        if nodes >= settings.max_nodes {
            let mut s = incumbent.unwrap_or_else(|| Solution::empty(prog, Status::IterLimit));
            s.status = Status::IterLimit;
            s.nodes = nodes;
            s.iterations = iterations;
            return Ok(s);
        }
        // Depth-first until an incumbent exists, then best bound.
        let idx = if incumbent.is_some() {
            let mut best = 0;
            for (k, nd) in open.iter().enumerate() {
                let b = &open[best];
                if nd.bound < b.bound || (nd.bound == b.bound && nd.id < b.id) {
                    best = k;
                }
            }
            best
        } else {
            open.len() - 1
        };
        let mut node = open.remove(idx);
        nodes += 1;
        if let Some(inc) = &incumbent {
            if node.bound >= inc.objective - 1e-9 * (1.0 + inc.objective.abs()) {
                continue;
            }
        }
        if !tighten_bounds(prog, &mut node.lb, &mut node.ub, settings) {
            continue;
        }
        // Continuous bounds from tightening inform branching only.
        let mut lb = prog.lower.clone();
        let mut ub = prog.upper.clone();
        for &b in &prog.binaries {
            lb[b] = node.lb[b];
            ub[b] = node.ub[b];
        }
        let sol = solve_node(prog, &lb, &ub, settings)?;
        iterations += sol.iterations;
        match sol.status {
            Status::Infeasible => continue,
            Status::Unbounded => {
                saw_unbounded = true;
                continue;
            }
            Status::IterLimit => continue,
            Status::Optimal => {}
        }
        if let Some(inc) = &incumbent {
            if sol.objective >= inc.objective - 1e-9 * (1.0 + inc.objective.abs()) {
                continue;
            }
        }
        // Most fractional binary, lowest index on ties.
        let mut branch: Option<(usize, f64)> = None;
        for &b in &prog.binaries {
            let v = sol.x[b];
            let frac = (v - v.round()).abs();
            if frac > settings.int_tol {
                let score = 0.5 - (v - 0.5).abs();
                match branch {
                    Some((_, s)) if score <= s => {}
                    _ => branch = Some((b, score)),
                }
            }
        }
        match branch {
            None => {
                let polished = polish(prog, &sol, &lb, &ub, settings)?;
                let done = feasibility;
                incumbent = Some(polished);
                if done {
                    break;
                }
            }
            Some((b, _)) => {
                let up_first = sol.x[b] >= 0.5;
                let mut down = Node {
                    lb: node.lb.clone(),
                    ub: node.ub.clone(),
                    bound: sol.objective,
                    id: 0,
                };
                down.ub[b] = 0.0;
                let mut up = Node {
                    lb: node.lb,
                    ub: node.ub,
                    bound: sol.objective,
                    id: 0,
                };
                up.lb[b] = 1.0;
                // The child explored first is pushed last.
                let (first, second) = if up_first { (up, down) } else { (down, up) };
                for mut child in [second, first] {
                    child.id = next_id;
                    next_id += 1;
                    open.push(child);
                }
            }
        }
    }
    match incumbent {
        Some(mut s) => {
            s.status = Status::Optimal;
            s.nodes = nodes;
            s.iterations = iterations;
            Ok(s)
        }
        None => {
            let mut s = Solution::empty(
                prog,
                if saw_unbounded {
                    Status::Unbounded
                } else {
                    Status::Infeasible
                },
            );
            s.nodes = nodes;
            s.iterations = iterations;
            Ok(s)
        }
    }
}

/// Re-solves with binaries fixed at their rounded values so the reported point
/// is exactly integral; keeps the unrounded point if the fixed problem fails.
fn polish(prog: &MathProgram, sol: &Solution, lb: &[f64], ub: &[f64], settings: &SolverSettings) -> Result<Solution> {
    let mut flb = lb.to_vec();
    let mut fub = ub.to_vec();
    let mut needs = false;
    for &b in &prog.binaries {
        let r = sol.x[b].round();
        if flb[b] != fub[b] {
            needs = true;
        }
        flb[b] = r;
        fub[b] = r;
    }
    if !needs {
        return Ok(sol.clone());
    }
    let p = solve_node(prog, &flb, &fub, settings)?;
    if p.status == Status::Optimal {
        Ok(p)
    } else {
        log::warn!("integral node could not be polished; keeping relaxed point");
        Ok(sol.clone())
    }
}
