//! Gain and nominal-trajectory recovery from demonstrations.

use serde::{Deserialize, Serialize};

use crate::demo::DemoSet;
use crate::error::{dim, Error, Result};
use crate::forward::AffineModel;
use crate::linalg::{cond, pinv, rank, serde_mat, serde_vec, Mat, Vector};
use crate::model::{build_block_operators, linearize, BlockOperators, Dims, LtvSystem, NonlinearSystem, System};
use crate::sls::{phi_from_k, FeedbackGain, SystemResponse};

/// Relative singular-value cutoff for the difference pseudoinverse.
pub const PINV_RTOL: f64 = 1e-10;

/// Consecutive demonstration differences; column `j` is demo `j+1` minus demo `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrices {
    pub u: Mat,
    /// Outputs `y_0..y_{T-1}` only.
    pub y: Mat,
}

pub fn stack_differences(set: &DemoSet, d: &Dims) -> Result<DifferenceMatrices> {
    let count = set.demos.len();
    if count < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 demonstrations, found {count}"
        )));
    }
    let (nu, ny) = (d.ni * d.horizon, d.no * d.horizon);
    let mut u = Mat::zeros(nu, count - 1);
    let mut y = Mat::zeros(ny, count - 1);
    for (k, demo) in set.demos.iter().enumerate() {
        if demo.u.len() != nu {
            return Err(dim("demonstration inputs", nu, demo.u.len()));
        }
        if demo.y.len() < ny {
            return Err(dim("demonstration outputs", ny, demo.y.len()));
        }
        if k == 0 {
            continue;
        }
        let prev = &set.demos[k - 1];
        u.set_column(k - 1, &(&demo.u - &prev.u));
        y.set_column(k - 1, &(demo.y.rows(0, ny) - prev.y.rows(0, ny)));
    }
    Ok(DifferenceMatrices { u, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainDiagnostics {
    pub rank_y: usize,
    pub required_rank: usize,
    /// Set when the output differences are not rich enough to pin the gain.
    pub rank_deficient: bool,
    /// Frobenius norm removed by the causal projection.
    pub projection: f64,
    /// `|U - K Y|_F` after projection.
    pub fit_residual: f64,
}

/// `K = U Y^+`, projected onto block-lower-triangular gains.
pub fn recover_gain(diff: &DifferenceMatrices, d: &Dims) -> Result<(FeedbackGain, GainDiagnostics)> {
    let raw = &diff.u * pinv(&diff.y, PINV_RTOL);
    let (k, projection) = FeedbackGain::project_lower(raw, d.ni, d.no, d.horizon)?;
    let rank_y = rank(&diff.y, PINV_RTOL);
    let required_rank = d.no * d.horizon;
    let fit_residual = (&diff.u - &k.matrix * &diff.y).norm();
    if rank_y < required_rank {
        log::warn!("output differences have rank {rank_y} < {required_rank}; the gain is not identifiable");
    }
    Ok((
        k,
        GainDiagnostics {
            rank_y,
            required_rank,
            rank_deficient: rank_y < required_rank,
            projection,
            fit_residual,
        },
    ))
}

/// `[[I - Z A, -Z B], [-K C, I]]` over `(z_0..z_{T-1}, v)`.
pub fn gamma_matrix(k: &FeedbackGain, ops: &BlockOperators) -> Mat {
    let d = ops.dims;
    let (nt, nit) = (d.n * d.horizon, d.ni * d.horizon);
    let mut g = Mat::zeros(nt + nit, nt + nit);
    g.view_mut((0, 0), (nt, nt))
        .copy_from(&(Mat::identity(nt, nt) - &ops.z * &ops.cal_a));
    g.view_mut((0, nt), (nt, nit)).copy_from(&(-(&ops.z * &ops.cal_b)));
    g.view_mut((nt, 0), (nit, nt)).copy_from(&(-(&k.matrix * &ops.cal_c)));
    g.view_mut((nt, nt), (nit, nit)).fill_with_identity();
    g
}

/// Per-demo right-hand side `(x0, 0, .., 0; u - K y)` of the nominal system.
fn gamma_rhs(k: &FeedbackGain, x0: &Vector, u: &Vector, y: &Vector, d: &Dims) -> Vector {
    let (nt, nit) = (d.n * d.horizon, d.ni * d.horizon);
    let mut r = Vector::zeros(nt + nit);
    r.rows_mut(0, d.n).copy_from(x0);
    let ky = &k.matrix * y.rows(0, d.no * d.horizon);
    r.rows_mut(nt, nit).copy_from(&(u - ky));
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct NominalRecovery {
    /// `z_0..z_T`; `z_T` is propagated from the last recovered state and input.
    pub z: Vector,
    pub v: Vector,
    pub gamma: Mat,
    pub gamma_cond: f64,
}

/// Averages the per-demo nominal systems and solves with the pseudoinverse of Gamma.
pub fn recover_nominal(set: &DemoSet, k: &FeedbackGain, system: &LtvSystem) -> Result<NominalRecovery> {
    if set.demos.is_empty() {
        return Err(Error::Validation("no demonstrations".into()));
    }
    let ops = build_block_operators(system)?;
    let d = ops.dims;
    let gamma = gamma_matrix(k, &ops);
    let gamma_cond = cond(&gamma);
    if gamma_cond > 1e12 {
        return Err(Error::Singular(format!(
            "nominal recovery matrix is numerically singular (cond {gamma_cond:.2e}); the recovered gain violates the regularity assumption"
        )));
    }
    let mut rhs = Vector::zeros(gamma.nrows());
    for demo in &set.demos {
        rhs += gamma_rhs(k, &system.x0, &demo.u, &demo.y, &d);
    }
    rhs /= set.demos.len() as f64;
    let sol = pinv(&gamma, 1e-14) * rhs;
    let nt = d.n * d.horizon;
    let v = sol.rows(nt, d.ni * d.horizon).into_owned();
    let z = extend_terminal(
        &sol.rows(0, nt).into_owned(),
        &v,
        |t, x, u| &system.a[t] * x + &system.b[t] * u,
        &d,
    );
    Ok(NominalRecovery {
        z,
        v,
        gamma,
        gamma_cond,
    })
}

fn extend_terminal(z: &Vector, v: &Vector, step: impl Fn(usize, &Vector, &Vector) -> Vector, d: &Dims) -> Vector {
    let tt = d.horizon;
    let mut out = Vector::zeros(d.n * (tt + 1));
    out.rows_mut(0, d.n * tt).copy_from(z);
    let last = z.rows(d.n * (tt - 1), d.n).into_owned();
    let u = v.rows(d.ni * (tt - 1), d.ni).into_owned();
    out.rows_mut(d.n * tt, d.n).copy_from(&step(tt - 1, &last, &u));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearFit {
    pub z: Vector,
    pub v: Vector,
    /// Infinity norm of the averaged residual `mean(u - K y) - v + K C z(v)`.
    pub residual: f64,
    pub iterations: usize,
}

/// Gauss-Newton single shooting on `sum_d |u_d - v - K (y_d - C z(v))|^2`.
/// The sum equals `D |r(v)|^2` plus a constant, with `r` the averaged residual.
pub fn recover_nominal_nonlinear(
    set: &DemoSet,
    k: &FeedbackGain,
    system: &NonlinearSystem,
    init: Option<&Vector>,
) -> Result<NonlinearFit> {
    if set.demos.is_empty() {
        return Err(Error::Validation("no demonstrations".into()));
    }
    let d = system.dims();
    let (nt, nit, not) = (d.n * d.horizon, d.ni * d.horizon, d.no * d.horizon);
    let mut cbar = Vector::zeros(nit);
    let mut ubar = Vector::zeros(nit);
    for demo in &set.demos {
        if demo.u.len() != nit {
            return Err(dim("demonstration inputs", nit, demo.u.len()));
        }
        cbar += &demo.u - &k.matrix * demo.y.rows(0, not);
        ubar += &demo.u;
    }
    cbar /= set.demos.len() as f64;
    ubar /= set.demos.len() as f64;
    let cal_c = crate::linalg::block_diag(&system.c[..d.horizon]);
    let kc = &k.matrix * &cal_c;
    let residual = |v: &Vector| -> Vector {
        let z = system.simulate(v);
        &cbar - v + &kc * z.rows(0, nt)
    };

    let mut v = init.cloned().unwrap_or(ubar);
    if v.len() != nit {
        return Err(dim("initial inputs", nit, v.len()));
    }
    let mut r = residual(&v);
    let mut cost = r.norm_squared();
    let mut failures = 0;
    let mut iterations = 0;
    for it in 1..=50 {
        iterations = it;
        let z = system.simulate(&v);
        let states: Vec<Vector> = (0..d.horizon).map(|t| z.rows(t * d.n, d.n).into_owned()).collect();
        let inputs: Vec<Vector> = (0..d.horizon).map(|t| v.rows(t * d.ni, d.ni).into_owned()).collect();
        let lin = linearize(system, &states, &inputs)?;
        let (p, _) = AffineModel::exact(lin).rollout_map();
        let jac = -Mat::identity(nit, nit) + &kc * p.rows(0, nt);
        let step = match (jac.transpose() * &jac).cholesky() {
            Some(c) => c.solve(&(-(jac.transpose() * &r))),
            None => -(pinv(&jac, 1e-12) * &r),
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &v + &step * alpha;
            let rc = residual(&cand);
            let cc = rc.norm_squared();
            if cc.is_finite() && cc <= cost * (1.0 - 1e-4 * alpha) + 1e-30 {
                v = cand;
                r = rc;
                cost = cc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            failures += 1;
            if failures >= 5 {
                return Err(Error::Divergence(format!(
                    "nominal fit stalled after {it} iterations (residual {:.3e})",
                    r.amax()
                )));
            }
            continue;
        }
        failures = 0;
        if (step * alpha).amax() <= 1e-7 || r.amax() <= 1e-14 {
            break;
        }
    }
    let zs = system.simulate(&v);
    Ok(NonlinearFit {
        z: zs,
        v,
        residual: r.amax(),
        iterations,
    })
}

/// Everything the constraint-inference step needs from the recovery stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveredPolicy {
    pub gain: FeedbackGain,
    /// Response of `gain` on `model`.
    pub phi: SystemResponse,
    #[serde(with = "serde_vec")]
    pub z: Vector,
    #[serde(with = "serde_vec")]
    pub v: Vector,
    #[serde(with = "serde_mat")]
    pub gamma: Mat,
    pub gamma_cond: f64,
    pub diagnostics: GainDiagnostics,
    /// Linear model the nominal satisfies: the system itself, or its
    /// linearization about the recovered nominal.
    pub model: LtvSystem,
    pub model_offsets: Vec<Vec<f64>>,
    /// Fit residual of the nonlinear regression (zero for linear systems).
    pub nonlinear_residual: f64,
}

impl RecoveredPolicy {
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

/// Full recovery: gain, nominal trajectory and response.
pub fn recover_policy(set: &DemoSet, system: &System) -> Result<RecoveredPolicy> {
    let d = system.dims();
    let diff = stack_differences(set, &d)?;
    let (gain, diagnostics) = recover_gain(&diff, &d)?;
    match system {
        System::Ltv(s) => {
            let nom = recover_nominal(set, &gain, s)?;
            let ops = build_block_operators(s)?;
            let phi = phi_from_k(&gain, &ops)?;
            Ok(RecoveredPolicy {
                gain,
                phi,
                z: nom.z,
                v: nom.v,
                gamma: nom.gamma,
                gamma_cond: nom.gamma_cond,
                diagnostics,
                model: s.clone(),
                model_offsets: vec![vec![0.0; d.n]; d.horizon],
                nonlinear_residual: 0.0,
            })
        }
        System::Nonlinear(nl) => {
            let fit = recover_nominal_nonlinear(set, &gain, nl, None)?;
            let states: Vec<Vector> = (0..d.horizon).map(|t| fit.z.rows(t * d.n, d.n).into_owned()).collect();
            let inputs: Vec<Vector> = (0..d.horizon)
                .map(|t| fit.v.rows(t * d.ni, d.ni).into_owned())
                .collect();
            let lin = linearize(nl, &states, &inputs)?;
            let offsets: Vec<Vec<f64>> = (0..d.horizon)
                .map(|t| {
                    let r = nl.step(t, &states[t], &inputs[t]) - &lin.a[t] * &states[t] - &lin.b[t] * &inputs[t];
                    r.iter().copied().collect()
                })
                .collect();
            let ops = build_block_operators(&lin)?;
            let phi = phi_from_k(&gain, &ops)?;
            let gamma = gamma_matrix(&gain, &ops);
            let gamma_cond = cond(&gamma);
            Ok(RecoveredPolicy {
                gain,
                phi,
                z: fit.z,
                v: fit.v,
                gamma,
                gamma_cond,
                diagnostics,
                model: lin,
                model_offsets: offsets,
                nonlinear_residual: fit.residual,
            })
        }
    }
}
