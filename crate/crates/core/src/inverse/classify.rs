//! Guaranteed-safe and guaranteed-unsafe workspace cells.
//!
//! A cell is safe when no KKT-compatible parameter places an obstacle over any
//! of its points, and unsafe when every compatible parameter covers all four
//! corners with one obstacle. Both are MILP feasibility questions on top of the
//! KKT program; a pool of known compatible parameters settles most cells
//! without a solve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{dot, ParametricFamily};
use crate::opt::{solve_milp, MathProgram, Objective, Status};

use super::kkt::{infer_theta, KktProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    GuaranteedSafe,
    GuaranteedUnsafe,
    Unknown,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::GuaranteedSafe => "safe",
            Verdict::GuaranteedUnsafe => "unsafe",
            Verdict::Unknown => "unknown",
        }
    }
}

/// Axis-aligned window `[x0, x1] x [y0, y1]` split into `nx` by `ny` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub window: [f64; 4],
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// `(x_lo, x_hi, y_lo, y_hi)` of cell `(i, j)`, `i` along x.
    pub fn cell(&self, i: usize, j: usize) -> [f64; 4] {
        let [x0, x1, y0, y1] = self.window;
        let dx = (x1 - x0) / self.nx as f64;
        let dy = (y1 - y0) / self.ny as f64;
        [
            x0 + i as f64 * dx,
            x0 + (i + 1) as f64 * dx,
            y0 + j as f64 * dy,
            y0 + (j + 1) as f64 * dy,
        ]
    }

    // Negated comparisons also reject NaN bounds.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.window;
        if self.nx == 0 || self.ny == 0 || !(x1 > x0) || !(y1 > y0) {
            return Err(Error::Validation(format!(
                "grid {}x{} over window {:?} is empty",
                self.nx, self.ny, self.window
            )));
        }
        Ok(())
    }
}

fn corners(c: &[f64; 4]) -> [[f64; 2]; 4] {
    [[c[0], c[2]], [c[1], c[2]], [c[1], c[3]], [c[0], c[3]]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellStats {
    /// MILPs actually solved for this cell.
    pub solves: usize,
    /// A solve hit the node limit; the verdict fell back to `Unknown`.
    pub node_limit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridClassification {
    pub grid: GridSpec,
    /// Row-major over `j` then `i`: entry `j * nx + i`.
    pub verdicts: Vec<Verdict>,
    pub stats: Vec<CellStats>,
    /// Compatible parameters used to settle cells without a solve.
    pub pool: Vec<Vec<f64>>,
}

impl GridClassification {
    pub fn verdict(&self, i: usize, j: usize) -> Verdict {
        self.verdicts[j * self.grid.nx + i]
    }

    pub fn count(&self, v: Verdict) -> usize {
        self.verdicts.iter().filter(|x| **x == v).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell_i", "cell_j", "verdict"])?;
        for j in 0..self.grid.ny {
            for i in 0..self.grid.nx {
                w.write_record([i.to_string(), j.to_string(), self.verdict(i, j).as_str().to_string()])?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Validation(e.to_string()))
    }
}

/// Parameters reachable in F: one witness plus the minimizer and maximizer of
/// each component.
pub fn witness_pool(kkt: &KktProgram) -> Result<Vec<Vec<f64>>> {
    let first = infer_theta(kkt)?;
    if !first.is_feasible() {
        return Err(Error::Infeasible(
            "no parameter is KKT-compatible with the recovered demonstrations".into(),
        ));
    }
    let mut pool = vec![first.theta.iter().copied().collect::<Vec<_>>()];
    let n = kkt.program.num_vars;
    let extremes: Vec<Option<Vec<f64>>> = (0..2 * kkt.param_dim)
        .into_par_iter()
        .map(|k| -> Result<Option<Vec<f64>>> {
            let mut p = kkt.program.clone();
            let mut f = match &p.objective {
                Objective::Quadratic { f, .. } => f.clone(),
                Objective::Feasibility => Vector::zeros(n),
            };
            f[kkt.layout.theta + k / 2] += if k % 2 == 0 { 1.0 } else { -1.0 };
            p.objective = Objective::Quadratic { h: Mat::zeros(n, n), f };
            let s = solve_milp(&p, &kkt.opts.solver)?;
            // Any incumbent is compatible, optimal or not.
            let feasible =
                s.status == Status::Optimal || (s.status == Status::IterLimit && p.primal_residual(&s.x) <= 1e-6);
            Ok(feasible.then(|| (0..kkt.param_dim).map(|i| s.x[kkt.layout.theta + i]).collect()))
        })
        .collect::<Result<_>>()?;
    for th in extremes.into_iter().flatten() {
        if !pool.contains(&th) {
            pool.push(th);
        }
    }
    Ok(pool)
}

/// Rectangle clipped by `normal . p >= offset` half-planes is nonempty.
pub fn cell_meets_region(cell: &[f64; 4], faces: &[(Vec<f64>, f64)]) -> bool {
    let mut poly: Vec<[f64; 2]> = corners(cell).to_vec();
    for (n, off) in faces {
        let val = |p: &[f64; 2]| n[0] * p[0] + n[1] * p[1] - off;
        let mut next = Vec::with_capacity(poly.len() + 2);
        for k in 0..poly.len() {
            let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
            let (va, vb) = (val(&a), val(&b));
            if va >= 0.0 {
                next.push(a);
            }
            if (va >= 0.0) != (vb >= 0.0) {
                let t = va / (va - vb);
                next.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
            }
        }
        poly = next;
        if poly.is_empty() {
            return false;
        }
    }
    true
}

fn obstacle_faces(fam: &ParametricFamily, o: usize, theta: &[f64]) -> Vec<(Vec<f64>, f64)> {
    fam.obstacles[o]
        .faces
        .iter()
        .map(|f| (f.normal.clone(), f.offset.eval(theta)))
        .collect()
}

fn widen(prog: &MathProgram, extra: usize) -> MathProgram {
    let n = prog.num_vars + extra;
    let mut p = prog.clone();
    p.num_vars = n;
    p.a_in = prog.a_in.clone().resize_horizontally(n, 0.0);
    p.a_eq = prog.a_eq.clone().resize_horizontally(n, 0.0);
    p.lower.resize(n, f64::NEG_INFINITY);
    p.upper.resize(n, f64::INFINITY);
    // Feasibility queries: the objective of the KKT program is irrelevant.
    p.objective = Objective::Feasibility;
    p
}

/// `{theta in F, q in cell, q in obstacle o at theta}`.
pub fn intersect_program(kkt: &KktProgram, fam: &ParametricFamily, o: usize, cell: &[f64; 4]) -> MathProgram {
    let base = kkt.program.num_vars;
    let mut p = widen(&kkt.program, 2);
    p.lower[base] = cell[0];
    p.upper[base] = cell[1];
    p.lower[base + 1] = cell[2];
    p.upper[base + 1] = cell[3];
    for f in &fam.obstacles[o].faces {
        let mut row = vec![0.0; p.num_vars];
        for (k, c) in f.offset.coeffs.iter().enumerate() {
            row[kkt.layout.theta + k] = *c;
        }
        row[base] = -f.normal[0];
        row[base + 1] = -f.normal[1];
        p.push_ineq(&row, -f.offset.constant);
    }
    p
}

/// `{theta in F, some corner outside some face of obstacle o at theta}`.
pub fn escape_program(kkt: &KktProgram, fam: &ParametricFamily, o: usize, cell: &[f64; 4]) -> MathProgram {
    let faces = &fam.obstacles[o].faces;
    let base = kkt.program.num_vars;
    let m = 4 * faces.len();
    let mut p = widen(&kkt.program, m);
    let mut pick = vec![0.0; p.num_vars];
    for (ci, c) in corners(cell).iter().enumerate() {
        for (b, f) in faces.iter().enumerate() {
            let y = base + ci * faces.len() + b;
            p.set_binary(y);
            pick[y] = -1.0;
            // n . corner - offset(theta) <= M (1 - y)
            let lhs_const = dot(&f.normal, c) - f.offset.constant;
            let mut worst = lhs_const;
            for (k, coef) in f.offset.coeffs.iter().enumerate() {
                worst += (-coef * kkt.param_lower[k]).max(-coef * kkt.param_upper[k]);
            }
            let big = worst.max(0.0) + 1.0;
            let mut row = vec![0.0; p.num_vars];
            for (k, coef) in f.offset.coeffs.iter().enumerate() {
                row[kkt.layout.theta + k] = -coef;
            }
            row[y] = big;
            p.push_ineq(&row, big - lhs_const);
        }
    }
    p.push_ineq(&pick, -1.0);
    p
}

enum Query {
    Feasible,
    Infeasible,
    Limit,
}

fn run(p: &MathProgram, kkt: &KktProgram, stats: &mut CellStats) -> Result<Query> {
    stats.solves += 1;
    let s = solve_milp(p, &kkt.opts.solver)?;
    Ok(match s.status {
        Status::Optimal => Query::Feasible,
        Status::Infeasible => Query::Infeasible,
        Status::Unbounded => Query::Feasible,
        Status::IterLimit => {
            stats.node_limit = true;
            Query::Limit
        }
    })
}

pub fn classify_cell(
    kkt: &KktProgram,
    fam: &ParametricFamily,
    cell: &[f64; 4],
    pool: &[Vec<f64>],
) -> Result<(Verdict, CellStats)> {
    let mut stats = CellStats::default();
    let mut safe = true;
    for o in 0..fam.obstacles.len() {
        if pool
            .iter()
            .any(|th| cell_meets_region(cell, &obstacle_faces(fam, o, th)))
        {
            safe = false;
            break;
        }
        match run(&intersect_program(kkt, fam, o, cell), kkt, &mut stats)? {
            Query::Infeasible => {}
            Query::Feasible | Query::Limit => {
                safe = false;
                break;
            }
        }
    }
    if safe {
        return Ok((Verdict::GuaranteedSafe, stats));
    }
    for o in 0..fam.obstacles.len() {
        let escapes = pool.iter().any(|th| {
            corners(cell).iter().any(|c| {
                fam.obstacles[o]
                    .faces
                    .iter()
                    .any(|f| dot(&f.normal, c) <= f.offset.eval(th))
            })
        });
        if escapes {
            continue;
        }
        if let Query::Infeasible = run(&escape_program(kkt, fam, o, cell), kkt, &mut stats)? {
            return Ok((Verdict::GuaranteedUnsafe, stats));
        }
    }
    Ok((Verdict::Unknown, stats))
}

/// Classifies every cell in parallel; the pool is fixed before the parallel
/// phase, so verdicts do not depend on scheduling.
pub fn classify_grid(kkt: &KktProgram, fam: &ParametricFamily, grid: &GridSpec) -> Result<GridClassification> {
    grid.validate()?;
    if fam.position_indices.len() != 2 {
        return Err(Error::Validation(format!(
            "grid classification needs 2 position components, found {}",
            fam.position_indices.len()
        )));
    }
    let pool = witness_pool(kkt)?;
    let results: Vec<(Verdict, CellStats)> = (0..grid.nx * grid.ny)
        .into_par_iter()
        .map(|idx| classify_cell(kkt, fam, &grid.cell(idx % grid.nx, idx / grid.nx), &pool))
        .collect::<Result<_>>()?;
    let limited = results.iter().filter(|(_, s)| s.node_limit).count();
    if limited > 0 {
        log::warn!("{limited} cells hit the node limit and were marked unknown");
    }
    let (verdicts, stats) = results.into_iter().unzip();
    Ok(GridClassification {
        grid: *grid,
        verdicts,
        stats,
        pool,
    })
}
