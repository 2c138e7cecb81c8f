//! Error bounds under transmission error, and the Monte-Carlo noise sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::{generate_demoset, perturb, DemoSet, NoiseStrategy};
use crate::error::{Error, Result};
use crate::forward::ForwardSolution;
use crate::linalg::{norm2, pinv, Vector};
use crate::model::{build_block_operators, ProblemInstance, System};

use super::kkt::{build_kkt_program, infer_theta, KktOptions};
use super::recover::{gamma_matrix, recover_policy, stack_differences, RecoveredPolicy, PINV_RTOL};

/// Absolute slack on the bound checks; at zero corruption both bounds vanish
/// and recovery is exact only to rounding.
pub const ROUNDOFF: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub rho4: f64,
    pub gamma_norm: f64,
    pub y_pinv_norm: f64,
    /// `max_d max(|delta_u_d|_2, |delta_y_d|_2)` over the corruption actually applied.
    pub epsilon: f64,
    pub err_k: f64,
    /// `|(delta z_0..z_{T-1}; delta v)|_2`.
    pub err_zv: f64,
    pub bound_k: f64,
    pub bound_zv: f64,
    pub holds_k: bool,
    pub holds_zv: bool,
}

/// Evaluates both bounds against the empirical errors of `recovered`.
///
/// `clean` holds the uncorrupted demonstrations and `corrupted` what the
/// learner saw; `truth` supplies `K*`, `z*`, `v*`.
pub fn sensitivity_bounds(
    clean: &DemoSet,
    corrupted: &DemoSet,
    system: &System,
    truth: &ForwardSolution,
    recovered: &RecoveredPolicy,
) -> Result<SensitivityReport> {
    let ltv = system
        .as_ltv()
        .ok_or_else(|| Error::Validation("sensitivity bounds need a linear time-varying system".into()))?;
    if clean.len() != corrupted.len() {
        return Err(Error::Missing(format!(
            "{} clean demonstrations for {} corrupted ones",
            clean.len(),
            corrupted.len()
        )));
    }
    let d = ltv.dims();
    let ops = build_block_operators(ltv)?;
    let y = stack_differences(clean, &d)?.y;
    let y_pinv_norm = norm2(&pinv(&y, PINV_RTOL));
    let gamma_norm = norm2(&gamma_matrix(&truth.gain, &ops));
    let c_norm = norm2(&ops.cal_c);
    let k_star = norm2(&truth.gain.matrix);
    let k_tilde = norm2(&recovered.gain.matrix);
    let sd = ((clean.len() - 1) as f64).sqrt();
    let rho1 = sd * y_pinv_norm;
    let rho2 = sd * gamma_norm * c_norm;
    let rho3 = sd * gamma_norm * y_pinv_norm;
    let rho4 = gamma_norm * k_star;

    let ny = d.no * d.horizon;
    let mut epsilon = 0.0_f64;
    for (c, t) in clean.demos.iter().zip(&corrupted.demos) {
        epsilon = epsilon.max((&t.u - &c.u).norm());
        epsilon = epsilon.max((t.y.rows(0, ny) - c.y.rows(0, ny)).norm());
    }

    let nt = d.n * d.horizon;
    let head =
        |z: &Vector, v: &Vector| Vector::from_iterator(nt + v.len(), z.rows(0, nt).iter().chain(v.iter()).copied());
    let est = head(&recovered.z, &recovered.v);
    let err_zv = (&est - head(&truth.z, &truth.v)).norm();
    let err_k = norm2(&(&recovered.gain.matrix - &truth.gain.matrix));
    let y1 = corrupted.demos[0].y.rows(0, ny).norm();
    let bound_k = rho1 * (k_tilde + 1.0) * epsilon;
    let bound_zv = (rho2 * est.norm() + rho3 * y1 * (k_tilde + 1.0) + rho4) * epsilon;
    Ok(SensitivityReport {
        rho1,
        rho2,
        rho3,
        rho4,
        gamma_norm,
        y_pinv_norm,
        epsilon,
        err_k,
        err_zv,
        bound_k,
        bound_zv,
        holds_k: err_k <= bound_k + ROUNDOFF,
        holds_zv: err_zv <= bound_zv + ROUNDOFF,
    })
}

/// Parameter components whose faces the true plan touches: the chosen
/// disjunct's tightened value is within `tol` of zero at `theta*`.
pub fn active_components(inst: &ProblemInstance, truth: &ForwardSolution, tol: f64) -> Result<Vec<usize>> {
    let star = inst
        .theta_star
        .as_ref()
        .ok_or_else(|| Error::Missing("theta_star is needed to locate touched faces".into()))?;
    let p = truth.stacked();
    let mut out = Vec::new();
    for (c, cj) in inst.unknown.conjuncts(&inst.dims()).iter().enumerate() {
        let row = &cj.disjuncts[truth.assignment[c]];
        if (row.value(&p, star.as_slice()) + truth.margins_unknown[c]).abs() <= tol {
            for (k, coef) in row.offset.coeffs.iter().enumerate() {
                if *coef != 0.0 && !out.contains(&k) {
                    out.push(k);
                }
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub epsilons: Vec<f64>,
    pub trials: usize,
    pub demos: usize,
    pub strategy: NoiseStrategy,
    pub seed: u64,
    /// Run constraint inference per trial (skipped when the family is empty).
    pub infer: bool,
    pub kkt: KktOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            epsilons: vec![0.0, 1e-4, 1e-3, 1e-2, 1e-1],
            trials: 20,
            demos: 50,
            strategy: NoiseStrategy::UniformBall,
            seed: 0,
            infer: true,
            kkt: KktOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub trial: usize,
    pub err_z: f64,
    pub err_v: f64,
    pub err_k: f64,
    /// NaN when inference was skipped or found no witness.
    pub err_theta_active: f64,
    pub bound_k: f64,
    pub bound_zv: f64,
    #[serde(skip)]
    pub report: Option<SensitivityReport>,
}

/// Demonstration and corruption seeds depend on the trial only, so every
/// epsilon sees the same clean demonstrations and the same corruption pattern
/// up to scale.
fn trial_seeds(root: u64, trial: usize) -> (u64, u64) {
    let mix = |x: u64| {
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let base = mix(root ^ (trial as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    (mix(base), mix(base ^ 1))
}

fn one_trial(
    inst: &ProblemInstance,
    truth: &ForwardSolution,
    active: &[usize],
    opts: &SweepOptions,
    epsilon: f64,
    trial: usize,
) -> Result<SweepRow> {
    let (demo_seed, corrupt_seed) = trial_seeds(opts.seed, trial);
    let clean = generate_demoset(truth, &inst.system, &inst.noise, opts.demos, opts.strategy, demo_seed)?;
    let seen = perturb(&clean, epsilon, corrupt_seed)?;
    let pol = recover_policy(&seen, &inst.system)?;
    let rep = sensitivity_bounds(&clean, &seen, &inst.system, truth, &pol)?;
    let d = inst.dims();
    let nt = d.n * d.horizon;
    let err_z = (pol.z.rows(0, nt) - truth.z.rows(0, nt)).norm();
    let err_v = (&pol.v - &truth.v).norm();
    let mut err_theta_active = f64::NAN;
    if opts.infer && !inst.unknown.is_empty() {
        if let Some(star) = &inst.theta_star {
            let kkt_opts = KktOptions {
                relaxed: epsilon > 0.0,
                ..opts.kkt
            };
            let kkt = build_kkt_program(&pol, inst, &kkt_opts)?;
            let w = infer_theta(&kkt)?;
            if w.is_feasible() {
                err_theta_active = active.iter().map(|&k| (w.theta[k] - star[k]).abs()).fold(0.0, f64::max);
            }
        }
    }
    Ok(SweepRow {
        epsilon,
        trial,
        err_z,
        err_v,
        err_k: rep.err_k,
        err_theta_active,
        bound_k: rep.bound_k,
        bound_zv: rep.bound_zv,
        report: Some(rep),
    })
}

/// One row per `(epsilon, trial)`, epsilon-major, computed in parallel.
pub fn run_noise_sweep(inst: &ProblemInstance, truth: &ForwardSolution, opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    if opts.trials == 0 || opts.epsilons.is_empty() {
        return Err(Error::Validation(
            "sweep needs at least one epsilon and one trial".into(),
        ));
    }
    let active = if opts.infer && !inst.unknown.is_empty() {
        active_components(inst, truth, 1e-6)?
    } else {
        Vec::new()
    };
    let jobs: Vec<(f64, usize)> = opts
        .epsilons
        .iter()
        .flat_map(|&e| (0..opts.trials).map(move |t| (e, t)))
        .collect();
    jobs.par_iter()
        .map(|&(e, t)| one_trial(inst, truth, &active, opts, e, t))
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epsilon",
        "trial",
        "err_z",
        "err_v",
        "err_K",
        "err_theta_active",
        "bound_K",
        "bound_zv",
    ])?;
    for r in rows {
        w.write_record([
            r.epsilon.to_string(),
            r.trial.to_string(),
            r.err_z.to_string(),
            r.err_v.to_string(),
            r.err_k.to_string(),
            r.err_theta_active.to_string(),
            r.bound_k.to_string(),
            r.bound_zv.to_string(),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .map_err(|e| Error::Validation(e.to_string()))
}
