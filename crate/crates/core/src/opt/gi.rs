//! Goldfarb-Idnani dual active-set method for strictly convex QPs:
//! `min 1/2 x^T H x + f^T x  s.t.  C_i x = d_i (i < n_eq),  C_i x >= d_i (i >= n_eq)`.
//!
//! Maintains `J = L^{-T} Q` and upper-triangular `R` with `J^T N = [R; 0]`, where
//! `H = L L^T` and `N` holds the active normals; both are updated by Givens rotations.

use nalgebra::Cholesky;

use crate::linalg::{Mat, Vector};

pub(crate) enum Outcome {
    Optimal,
    /// Active set at failure plus the constraint that could not be added.
    Infeasible(Vec<usize>),
    IterLimit,
}

pub(crate) struct GiResult {
    pub outcome: Outcome,
    pub x: Vector,
    /// Multiplier per row in the `C x >= d` convention.
    pub u: Vector,
    pub iterations: usize,
}

/// `None` when `H` is not positive definite.
pub(crate) fn solve(
    h: &Mat,
    f: &Vector,
    c: &Mat,
    d: &Vector,
    n_eq: usize,
    sel_tol: f64,
    max_iter: usize,
) -> Option<GiResult> {
    let n = h.nrows();
    let m = c.nrows();
    let chol = Cholesky::new(h.clone())?;
    let l = chol.l();
    let linv = l.solve_lower_triangular(&Mat::identity(n, n))?;
    if !linv.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut j = linv.transpose();
    let mut r = Mat::zeros(n, n);
    let mut x = -chol.solve(f);
    let mut active: Vec<usize> = Vec::new();
    let mut sign: Vec<f64> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let mut iterations = 0;

    let finish = |outcome, x: Vector, active: &[usize], sign: &[f64], u: &[f64], iterations| {
        let mut uu = Vector::zeros(m);
        for (k, &a) in active.iter().enumerate() {
            uu[a] = sign[k] * u[k];
        }
        GiResult {
            outcome,
            x,
            u: uu,
            iterations,
        }
    };

    loop {
        // Pick a violated constraint: equalities first, then the most violated inequality.
        let s = c * &x - d;
        let mut pick: Option<usize> = None;
        for i in 0..n_eq {
            if !is_active[i] && s[i].abs() > sel_tol {
                pick = Some(i);
                break;
            }
        }
        if pick.is_none() {
            let mut worst = -sel_tol;
            for i in n_eq..m {
                if !is_active[i] && s[i] < worst {
                    worst = s[i];
                    pick = Some(i);
                }
            }
        }
        let Some(p) = pick else {
            return Some(finish(Outcome::Optimal, x, &active, &sign, &u, iterations));
        };
        let sg = if p < n_eq && s[p] > 0.0 { -1.0 } else { 1.0 };
        let np: Vector = c.row(p).transpose() * sg;
        let mut sp = sg * s[p];
        let mut up = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Some(finish(Outcome::IterLimit, x, &active, &sign, &u, iterations));
            }
            let q = active.len();
            let dv = j.transpose() * &np;
            let d2 = dv.rows(q, n - q);
            let z = j.columns(q, n - q) * d2;
            let ztn = d2.norm_squared();
            let mut rv = Vector::zeros(q);
            for k in (0..q).rev() {
                let mut acc = dv[k];
                for l in k + 1..q {
                    acc -= r[(k, l)] * rv[l];
                }
                rv[k] = acc / r[(k, k)];
            }
            let mut t1 = f64::INFINITY;
            let mut kdrop = None;
            for k in 0..q {
                if active[k] >= n_eq && rv[k] > 0.0 {
                    let ratio = u[k] / rv[k];
                    if ratio < t1 {
                        t1 = ratio;
                        kdrop = Some(k);
                    }
                }
            }
            let t2 = if ztn > 1e-14 * dv.norm_squared() && ztn > 1e-300 {
                -sp / ztn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                let mut conflict = active.clone();
                conflict.push(p);
                return Some(finish(Outcome::Infeasible(conflict), x, &active, &sign, &u, iterations));
            }
            if t2.is_finite() {
                x += &z * t;
                sp += t * ztn;
            }
            for k in 0..q {
                u[k] -= t * rv[k];
            }
            up += t;
            if t2 <= t1 {
                add_constraint(&mut j, &mut r, dv, q);
                active.push(p);
                sign.push(sg);
                u.push(up);
                is_active[p] = true;
                break;
            }
            let k = kdrop.expect("partial step implies a blocking multiplier");
            is_active[active[k]] = false;
            active.remove(k);
            sign.remove(k);
            u.remove(k);
            drop_constraint(&mut j, &mut r, k, q);
        }
    }
}

fn rotate_cols(j: &mut Mat, a: usize, b: usize, cs: f64, sn: f64) {
    for i in 0..j.nrows() {
        let (ja, jb) = (j[(i, a)], j[(i, b)]);
        j[(i, a)] = cs * ja + sn * jb;
        j[(i, b)] = -sn * ja + cs * jb;
    }
}

fn add_constraint(j: &mut Mat, r: &mut Mat, mut dv: Vector, q: usize) {
    let n = j.nrows();
    for i in (q + 1..n).rev() {
        let (a, b) = (dv[i - 1], dv[i]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (cs, sn) = (a / h, b / h);
        dv[i - 1] = h;
        dv[i] = 0.0;
        rotate_cols(j, i - 1, i, cs, sn);
    }
    for i in 0..=q {
        r[(i, q)] = dv[i];
    }
}

fn drop_constraint(j: &mut Mat, r: &mut Mat, k: usize, q: usize) {
    for col in k..q - 1 {
        for i in 0..=col + 1 {
            r[(i, col)] = r[(i, col + 1)];
        }
    }
    for i in 0..r.nrows() {
        r[(i, q - 1)] = 0.0;
    }
    // Restore triangularity of the Hessenberg tail.
    for i in k..q - 1 {
        let (a, b) = (r[(i, i)], r[(i + 1, i)]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (cs, sn) = (a / h, b / h);
        for col in i..q - 1 {
            let (ra, rb) = (r[(i, col)], r[(i + 1, col)]);
            r[(i, col)] = cs * ra + sn * rb;
            r[(i + 1, col)] = -sn * ra + cs * rb;
        }
        r[(i + 1, i)] = 0.0;
        rotate_cols(j, i, i + 1, cs, sn);
    }
}
