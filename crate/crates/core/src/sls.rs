//! System-response algebra: closed-loop maps from noise to state/input deviations.

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::linalg::{max_abs, serde_mat, solve_unit_lower, upper_block_magnitude, zero_upper_blocks, Mat, Vector};
use crate::model::{BlockOperators, Dims};

/// Causal output-error gain `u - v = K (y - C z)`; `K` is `n_iT x n_oT` with
/// blocks strictly above the block diagonal exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackGain {
    #[serde(with = "serde_mat")]
    pub matrix: Mat,
    pub ni: usize,
    pub no: usize,
    pub horizon: usize,
}

impl FeedbackGain {
    /// Rejects any nonzero entry above the block diagonal.
    pub fn new(matrix: Mat, ni: usize, no: usize, horizon: usize) -> Result<Self> {
        if matrix.shape() != (ni * horizon, no * horizon) {
            return Err(dim("gain rows", ni * horizon, matrix.nrows()));
        }
        let up = upper_block_magnitude(&matrix, ni, no);
        if up != 0.0 {
            return Err(Error::Validation(format!(
                "gain is not causal: upper-block magnitude {up:e}"
            )));
        }
        Ok(FeedbackGain {
            matrix,
            ni,
            no,
            horizon,
        })
    }

    /// Zeroes the upper blocks; returns the gain and the Frobenius norm removed.
    pub fn project_lower(mut matrix: Mat, ni: usize, no: usize, horizon: usize) -> Result<(Self, f64)> {
        if matrix.shape() != (ni * horizon, no * horizon) {
            return Err(dim("gain rows", ni * horizon, matrix.nrows()));
        }
        let removed = zero_upper_blocks(&mut matrix, ni, no);
        Ok((
            FeedbackGain {
                matrix,
                ni,
                no,
                horizon,
            },
            removed,
        ))
    }

    pub fn zeros(d: &Dims) -> Self {
        FeedbackGain {
            matrix: Mat::zeros(d.ni * d.horizon, d.no * d.horizon),
            ni: d.ni,
            no: d.no,
            horizon: d.horizon,
        }
    }

    /// Memoryless gain: `K_{t,t} = block`, all other blocks zero.
    pub fn static_block(block: &Mat, horizon: usize) -> Self {
        let (ni, no) = block.shape();
        let mut m = Mat::zeros(ni * horizon, no * horizon);
        for t in 0..horizon {
            m.view_mut((t * ni, t * no), (ni, no)).copy_from(block);
        }
        FeedbackGain {
            matrix: m,
            ni,
            no,
            horizon,
        }
    }

    pub fn block(&self, t: usize, tau: usize) -> Mat {
        self.matrix
            .view((t * self.ni, tau * self.no), (self.ni, self.no))
            .into_owned()
    }
}

/// The four closed-loop maps from stacked `(w, e)` to `(x_0..x_{T-1}, u)` deviations.
///
/// The `w` stack is `(x_0 deviation, w_0, .., w_{T-2})`; its first block enters
/// `x_0` directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResponse {
    #[serde(with = "serde_mat")]
    pub xw: Mat,
    #[serde(with = "serde_mat")]
    pub xe: Mat,
    #[serde(with = "serde_mat")]
    pub uw: Mat,
    #[serde(with = "serde_mat")]
    pub ue: Mat,
}

pub fn phi_from_k(k: &FeedbackGain, ops: &BlockOperators) -> Result<SystemResponse> {
    let d = ops.dims;
    if k.matrix.shape() != (d.ni * d.horizon, d.no * d.horizon) {
        return Err(dim("gain rows", d.ni * d.horizon, k.matrix.nrows()));
    }
    let nt = d.n * d.horizon;
    let zb = &ops.z * &ops.cal_b;
    let zbk = &zb * &k.matrix;
    let kc = &k.matrix * &ops.cal_c;
    let m = Mat::identity(nt, nt) - &ops.z * &ops.cal_a - &zbk * &ops.cal_c;
    // Strict causality of Z makes m unit lower-triangular.
    let xw = solve_unit_lower(&m, &Mat::identity(nt, nt));
    let xe = &xw * &zbk;
    let uw = &kc * &xw;
    let ue = &kc * &xe + &k.matrix;
    Ok(SystemResponse { xw, xe, uw, ue })
}

pub fn k_from_phi(phi: &SystemResponse, d: &Dims) -> Result<FeedbackGain> {
    let n = d.n;
    for t in 0..d.horizon {
        let blk = phi.xw.view((t * n, t * n), (n, n)).into_owned();
        if blk.determinant().abs() < 1e-12 {
            return Err(Error::Singular(format!("phi_xw diagonal block {t} is singular")));
        }
    }
    let x = phi
        .xw
        .clone()
        .lu()
        .solve(&phi.xe)
        .ok_or_else(|| Error::Singular("phi_xw is singular".into()))?;
    let k = &phi.ue - &phi.uw * x;
    let up = upper_block_magnitude(&k, d.ni, d.no);
    if up > 1e-6 * (1.0 + max_abs(&k)) {
        return Err(Error::Validation(format!(
            "response encodes a non-causal gain (upper-block magnitude {up:e})"
        )));
    }
    let (g, _) = FeedbackGain::project_lower(k, d.ni, d.no, d.horizon)?;
    Ok(g)
}

/// Max-abs residuals of the achievability equalities plus the causality check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub controllability: f64,
    pub observability: f64,
    pub upper_block: f64,
    pub pass: bool,
}

pub const DEFAULT_RESPONSE_TOL: f64 = 1e-8;

pub fn verify_response(phi: &SystemResponse, ops: &BlockOperators, tol: f64) -> ResidualReport {
    let d = ops.dims;
    let nt = d.n * d.horizon;
    let i_za = Mat::identity(nt, nt) - &ops.z * &ops.cal_a;
    let zb = &ops.z * &ops.cal_b;
    let r1 = &i_za * &phi.xw - &zb * &phi.uw - Mat::identity(nt, nt);
    let r2 = &i_za * &phi.xe - &zb * &phi.ue;
    let r3 = &phi.xw * &i_za - &phi.xe * &ops.cal_c - Mat::identity(nt, nt);
    let r4 = &phi.uw * &i_za - &phi.ue * &ops.cal_c;
    let controllability = max_abs(&r1).max(max_abs(&r2));
    let observability = max_abs(&r3).max(max_abs(&r4));
    let upper_block = upper_block_magnitude(&phi.xw, d.n, d.n)
        .max(upper_block_magnitude(&phi.xe, d.n, d.no))
        .max(upper_block_magnitude(&phi.uw, d.ni, d.n))
        .max(upper_block_magnitude(&phi.ue, d.ni, d.no));
    ResidualReport {
        controllability,
        observability,
        upper_block,
        pass: controllability <= tol && observability <= tol && upper_block <= tol,
    }
}

/// Affine map from the noise vector `(x_0 deviation, w_0..w_{T-1}, e_0..e_{T-1})`
/// to the stacked `(x_0..x_T, u_0..u_{T-1})` deviation.
#[derive(Debug, Clone)]
pub struct NoiseMap {
    pub dims: Dims,
    pub matrix: Mat,
}

impl NoiseMap {
    pub fn x0_cols(&self) -> std::ops::Range<usize> {
        0..self.dims.n
    }
    pub fn w_cols(&self) -> std::ops::Range<usize> {
        let n = self.dims.n;
        n..n + n * self.dims.horizon
    }
    pub fn e_cols(&self) -> std::ops::Range<usize> {
        let s = self.w_cols().end;
        s..s + self.dims.no * self.dims.horizon
    }

    /// Stacked noise vector in this map's column order.
    pub fn stack_noise(&self, x0: &Vector, w: &[Vector], e: &[Vector]) -> Vector {
        let d = self.dims;
        let mut out = Vector::zeros(d.noise_len());
        out.rows_mut(0, d.n).copy_from(x0);
        for t in 0..d.horizon {
            out.rows_mut(d.n + t * d.n, d.n).copy_from(&w[t]);
            out.rows_mut(d.n + d.n * d.horizon + t * d.no, d.no).copy_from(&e[t]);
        }
        out
    }
}

pub fn noise_map(phi: &SystemResponse, ops: &BlockOperators) -> NoiseMap {
    let d = ops.dims;
    let (n, ni, no, tt) = (d.n, d.ni, d.no, d.horizon);
    let nt = n * tt;
    let mut m = Mat::zeros(d.stacked_len(), d.noise_len());
    let wc = n;
    let ec = n + nt;
    let uo = d.u_offset();
    // x_0..x_{T-1} and u rows: the x_0 deviation is the first w-stack block and
    // w_t feeds stack block t+1.
    for (rows_off, pw, pe, nr) in [(0, &phi.xw, &phi.xe, nt), (uo, &phi.uw, &phi.ue, ni * tt)] {
        m.view_mut((rows_off, 0), (nr, n)).copy_from(&pw.columns(0, n));
        if tt > 1 {
            m.view_mut((rows_off, wc), (nr, n * (tt - 1)))
                .copy_from(&pw.columns(n, n * (tt - 1)));
        }
        m.view_mut((rows_off, ec), (nr, no * tt)).copy_from(pe);
    }
    let last_x = m.rows(n * (tt - 1), n).into_owned();
    let last_u = m.rows(uo + ni * (tt - 1), ni).into_owned();
    let mut xt = &ops.a_last * last_x + &ops.b_last * last_u;
    for i in 0..n {
        xt[(i, wc + n * (tt - 1) + i)] += 1.0;
    }
    m.view_mut((nt, 0), (n, d.noise_len())).copy_from(&xt);
    NoiseMap { dims: d, matrix: m }
}

/// Completes a response from its `phi_ue` block using the achievability
/// equalities: `phi_uw` from the observability row and the state blocks from
/// the controllability row. Every block-lower-triangular `phi_ue` yields an
/// achievable response.
pub fn phi_from_ue(ue: &Mat, ops: &BlockOperators) -> SystemResponse {
    let d = ops.dims;
    let (n, ni, no, tt) = (d.n, d.ni, d.no, d.horizon);
    let nt = n * tt;
    let mut uw = Mat::zeros(ni * tt, nt);
    for t in 0..tt {
        for j in (0..=t).rev() {
            let c = ops.cal_c.view((j * no, j * n), (no, n));
            let mut blk = ue.view((t * ni, j * no), (ni, no)) * c;
            if j < t {
                let a = ops.cal_a.view((j * n, j * n), (n, n));
                blk += uw.view((t * ni, (j + 1) * n), (ni, n)) * a;
            }
            uw.view_mut((t * ni, j * n), (ni, n)).copy_from(&blk);
        }
    }
    let i_za = Mat::identity(nt, nt) - &ops.z * &ops.cal_a;
    let zb = &ops.z * &ops.cal_b;
    let xw = solve_unit_lower(&i_za, &(&zb * &uw + Mat::identity(nt, nt)));
    let xe = solve_unit_lower(&i_za, &(&zb * ue));
    SystemResponse {
        xw,
        xe,
        uw,
        ue: ue.clone(),
    }
}

/// Positions `(row, col)` of the free entries of a block-lower-triangular `phi_ue`.
pub fn lower_block_entries(d: &Dims) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..d.ni * d.horizon {
        for c in 0..d.no * d.horizon {
            if c / d.no <= r / d.ni {
                out.push((r, c));
            }
        }
    }
    out
}

/// Affine map from free `phi_ue` entries `q` to the full noise map and to the
/// flattened response: `M(q) = M0 + sum_k q_k M_k`.
#[derive(Debug, Clone)]
pub struct ResponseBasis {
    pub entries: Vec<(usize, usize)>,
    pub map0: Mat,
    pub map_basis: Vec<Mat>,
    pub flat0: Vector,
    /// Column k is the change in the flattened response per unit `q_k`.
    pub flat_basis: Mat,
}

fn flatten(phi: &SystemResponse) -> Vector {
    let parts = [&phi.xw, &phi.xe, &phi.uw, &phi.ue];
    let len: usize = parts.iter().map(|m| m.len()).sum();
    Vector::from_iterator(len, parts.iter().flat_map(|m| m.iter().copied()))
}

impl ResponseBasis {
    pub fn new(ops: &BlockOperators) -> Self {
        let d = ops.dims;
        let entries = lower_block_entries(&d);
        let zero = Mat::zeros(d.ni * d.horizon, d.no * d.horizon);
        let phi0 = phi_from_ue(&zero, ops);
        let map0 = noise_map(&phi0, ops).matrix;
        let flat0 = flatten(&phi0);
        let mut map_basis = Vec::with_capacity(entries.len());
        let mut flat_basis = Mat::zeros(flat0.len(), entries.len());
        for (k, &(r, c)) in entries.iter().enumerate() {
            let mut ue = zero.clone();
            ue[(r, c)] = 1.0;
            let phi = phi_from_ue(&ue, ops);
            map_basis.push(noise_map(&phi, ops).matrix - &map0);
            flat_basis.set_column(k, &(flatten(&phi) - &flat0));
        }
        ResponseBasis {
            entries,
            map0,
            map_basis,
            flat0,
            flat_basis,
        }
    }

    pub fn ue_from_params(&self, q: &Vector, d: &Dims) -> Mat {
        let mut ue = Mat::zeros(d.ni * d.horizon, d.no * d.horizon);
        for (k, &(r, c)) in self.entries.iter().enumerate() {
            ue[(r, c)] = q[k];
        }
        ue
    }

    pub fn params_from_ue(&self, ue: &Mat) -> Vector {
        Vector::from_iterator(self.entries.len(), self.entries.iter().map(|&(r, c)| ue[(r, c)]))
    }
}
